//! Subscriber-side telemetry pipeline: payload schemas, canonical ingest
//! timestamps and a durable, time-range-queryable segment store.

pub mod fixture;
pub mod schema;
pub mod service;
pub mod store;
pub mod time;

pub use schema::{parse_payload, RejectReason, StreamId, TelemetrySample, TopicMap};
pub use service::{IngestPipeline, IngestService, IngestStats};
pub use store::{Order, Page, QueryError, RecoveryStats, Store, StoreError, StoreOptions};
pub use time::{format_ts, parse_ts, Clock, ManualClock, SystemClock};

/// Environment variable overriding the configured data directory.
pub const DATA_DIR_ENV: &str = "PLANTPULSE_DATA_DIR";

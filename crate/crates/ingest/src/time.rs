//! Ingest clock and the `YYYY-MM-DD HH:MM:SS` rendering used at the API edge.
//! Everything is UTC milliseconds since the epoch.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, NaiveDateTime};
use thiserror::Error;

pub const TS_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        chrono::Utc::now().timestamp_millis()
    }
}

/// Test clock advanced by hand.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(ms: i64) -> Self {
        ManualClock(AtomicI64::new(ms))
    }

    pub fn set(&self, ms: i64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: i64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparsable timestamp {0:?}: expected YYYY-MM-DD HH:MM:SS or epoch milliseconds")]
pub struct TimestampError(pub String);

/// Renders UTC milliseconds, truncating to whole seconds.
pub fn format_ts(ms: i64) -> String {
    match DateTime::from_timestamp_millis(ms) {
        Some(dt) => dt.format(TS_FORMAT).to_string(),
        None => ms.to_string(),
    }
}

/// Accepts `YYYY-MM-DD HH:MM:SS` (UTC) or a decimal epoch-millis value.
pub fn parse_ts(s: &str) -> Result<i64, TimestampError> {
    let s = s.trim();
    if !s.is_empty() && s.bytes().enumerate().all(|(i, b)| b.is_ascii_digit() || (i == 0 && b == b'-')) {
        return s.parse().map_err(|_| TimestampError(s.to_owned()));
    }
    NaiveDateTime::parse_from_str(s, TS_FORMAT)
        .map(|dt| dt.and_utc().timestamp_millis())
        .map_err(|_| TimestampError(s.to_owned()))
}

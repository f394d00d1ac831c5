//! MQTT subscriber feeding the store.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use log::{debug, warn};
use plantpulse_mqtt::client::{Client, ClientError, ClientOptions};
use plantpulse_mqtt::QoS;
use serde::Serialize;

use crate::schema::{parse_payload, TopicMap};
use crate::store::Store;
use crate::time::Clock;

pub const DEFAULT_FILTER: &str = "plant/#";
pub const QUARANTINE_LEN: usize = 100;
const QUARANTINE_PAYLOAD_BYTES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quarantined {
    pub at_ms: i64,
    pub topic: String,
    pub reason: String,
    pub payload: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub received: u64,
    pub stored: u64,
    /// Per-reason counts: unknown_topic, malformed_json, schema_violation, storage.
    pub rejected: BTreeMap<&'static str, u64>,
    pub quarantine: VecDeque<Quarantined>,
}

impl IngestStats {
    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }
}

/// Validation and storage for one message at a time; the MQTT handler
/// and tests drive it directly.
pub struct IngestPipeline {
    store: Arc<Store>,
    topics: TopicMap,
    clock: Arc<dyn Clock>,
    stats: Mutex<IngestStats>,
}

impl IngestPipeline {
    pub fn new(store: Arc<Store>, topics: TopicMap, clock: Arc<dyn Clock>) -> Self {
        IngestPipeline { store, topics, clock, stats: Mutex::new(IngestStats::default()) }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    /// Returns the assigned seq, or `None` if the message was rejected.
    pub fn handle(&self, topic: &str, payload: &[u8]) -> Option<u64> {
        let now = self.clock.now_ms();
        let outcome = parse_payload(&self.topics, topic, payload, now)
            .map_err(|r| (r.kind(), r.to_string()))
            .and_then(|s| self.store.append(s).map_err(|e| ("storage", e.to_string())));
        let mut stats = self.stats.lock().unwrap_or_else(|e| e.into_inner());
        stats.received += 1;
        match outcome {
            Ok(seq) => {
                stats.stored += 1;
                Some(seq)
            }
            Err((kind, reason)) => {
                debug!("rejected - topic={topic} {reason}");
                *stats.rejected.entry(kind).or_default() += 1;
                if stats.quarantine.len() == QUARANTINE_LEN {
                    stats.quarantine.pop_front();
                }
                let cut = payload.len().min(QUARANTINE_PAYLOAD_BYTES);
                stats.quarantine.push_back(Quarantined {
                    at_ms: now,
                    topic: topic.to_owned(),
                    reason,
                    payload: String::from_utf8_lossy(&payload[..cut]).into_owned(),
                });
                None
            }
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub struct IngestService {
    pipeline: Arc<IngestPipeline>,
    client: Client,
}

impl IngestService {
    /// Connects in the background and subscribes to `filter` at QoS 1.
    /// Returns once the subscription is granted.
    pub async fn start(pipeline: Arc<IngestPipeline>, opts: ClientOptions, filter: &str) -> Result<Self, ClientError> {
        let client = Client::spawn(opts)?;
        let p = pipeline.clone();
        client
            .subscribe(filter, QoS::AtLeastOnce, move |topic, payload| {
                p.handle(topic, payload);
            })
            .await?;
        if let Some(reason) = pipeline.store.failure() {
            warn!("ingest_started_degraded - {reason}");
        }
        Ok(IngestService { pipeline, client })
    }

    pub fn pipeline(&self) -> &Arc<IngestPipeline> {
        &self.pipeline
    }

    pub fn stats(&self) -> IngestStats {
        self.pipeline.stats()
    }

    pub fn is_connected(&self) -> bool {
        self.client.is_connected()
    }

    pub async fn stop(self) {
        self.client.disconnect().await;
        if let Err(e) = self.pipeline.store.sync() {
            warn!("final_sync_failed - {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::StreamId;
    use crate::time::ManualClock;

    #[test]
    fn counts_every_message() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let clock = Arc::new(ManualClock::new(5_000));
        let p = IngestPipeline::new(store.clone(), TopicMap::default(), clock.clone());
        assert_eq!(p.handle("plant/energy/industrial", br#"{"power_kw":0.95}"#), Some(1));
        clock.advance(1000);
        assert_eq!(p.handle("plant/energy/industrial", br#"{"power_kw":"high"}"#), None);
        assert_eq!(p.handle("plant/other", b"{}"), None);
        assert_eq!(p.handle("plant/env/room1", b"not json"), None);
        let s = p.stats();
        assert_eq!((s.received, s.stored, s.rejected_total()), (4, 1, 3));
        assert_eq!(s.rejected["schema_violation"], 1);
        assert_eq!(s.quarantine[0].at_ms, 6_000);
        assert_eq!(store.latest(StreamId::IndustrialEnergy).unwrap().unwrap().ingest_ts, 5_000);
    }

    #[test]
    fn quarantine_keeps_last_hundred() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path()).unwrap());
        let p = IngestPipeline::new(store, TopicMap::default(), Arc::new(ManualClock::new(0)));
        for i in 0..150 {
            p.handle(&format!("nowhere/{i}"), b"{}");
        }
        let s = p.stats();
        assert_eq!(s.quarantine.len(), QUARANTINE_LEN);
        assert_eq!(s.quarantine.front().unwrap().topic, "nowhere/50");
        assert_eq!(s.rejected["unknown_topic"], 150);
    }
}

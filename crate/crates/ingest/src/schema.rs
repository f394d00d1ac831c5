//! Stream identities, payload schemas and topic mapping.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    Esp32Energy,
    IndustrialEnergy,
    Environment,
}

pub struct FieldSpec {
    pub name: &'static str,
    pub unit: &'static str,
    pub range: Option<(f64, f64)>,
}

const ESP32: &[FieldSpec] = &[
    FieldSpec { name: "voltage", unit: "V", range: None },
    FieldSpec { name: "current", unit: "A", range: None },
];
const INDUSTRIAL: &[FieldSpec] = &[FieldSpec { name: "power_kw", unit: "kW", range: None }];
const ENVIRONMENT: &[FieldSpec] = &[
    FieldSpec { name: "temperature_c", unit: "°C", range: None },
    FieldSpec { name: "humidity_pct", unit: "%RH", range: Some((0.0, 100.0)) },
];

/// Optional publisher timestamp key, kept verbatim and never used for ordering.
pub const SOURCE_TS_KEY: &str = "source_ts";

impl StreamId {
    pub const ALL: [StreamId; 3] = [StreamId::Esp32Energy, StreamId::IndustrialEnergy, StreamId::Environment];

    pub fn as_str(self) -> &'static str {
        match self {
            StreamId::Esp32Energy => "esp32_energy",
            StreamId::IndustrialEnergy => "industrial_energy",
            StreamId::Environment => "environment",
        }
    }

    /// Fields in their canonical order.
    pub fn schema(self) -> &'static [FieldSpec] {
        match self {
            StreamId::Esp32Energy => ESP32,
            StreamId::IndustrialEnergy => INDUSTRIAL,
            StreamId::Environment => ENVIRONMENT,
        }
    }

    pub fn field_names(self) -> impl Iterator<Item = &'static str> {
        self.schema().iter().map(|f| f.name)
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown stream {0:?}")]
pub struct UnknownStream(pub String);

impl FromStr for StreamId {
    type Err = UnknownStream;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StreamId::ALL.into_iter().find(|id| id.as_str() == s).ok_or_else(|| UnknownStream(s.to_owned()))
    }
}

/// A stored (or about to be stored) record. `seq` is 0 until appended.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySample {
    pub stream: StreamId,
    pub seq: u64,
    pub ingest_ts: i64,
    pub source_ts: Option<i64>,
    /// Values in schema order.
    pub fields: Vec<(String, f64)>,
}

impl TelemetrySample {
    /// Builds an unsequenced sample, checking it against the stream schema.
    pub fn new(
        stream: StreamId,
        ingest_ts: i64,
        source_ts: Option<i64>,
        mut values: BTreeMap<String, f64>,
    ) -> Result<Self, RejectReason> {
        let mut fields = Vec::with_capacity(stream.schema().len());
        for spec in stream.schema() {
            let v = values
                .remove(spec.name)
                .ok_or_else(|| RejectReason::SchemaViolation(format!("missing field {:?}", spec.name)))?;
            fields.push((spec.name.to_owned(), v));
        }
        if let Some(extra) = values.keys().next() {
            return Err(RejectReason::SchemaViolation(format!("unexpected field {extra:?}")));
        }
        let sample = TelemetrySample { stream, seq: 0, ingest_ts, source_ts, fields };
        sample.validate()?;
        Ok(sample)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Field set, finiteness and range checks.
    pub fn validate(&self) -> Result<(), RejectReason> {
        let schema = self.stream.schema();
        if self.fields.len() != schema.len() {
            return Err(RejectReason::SchemaViolation(format!(
                "expected {} fields, got {}",
                schema.len(),
                self.fields.len()
            )));
        }
        for (spec, (name, v)) in schema.iter().zip(&self.fields) {
            if spec.name != name {
                return Err(RejectReason::SchemaViolation(format!("unexpected field {name:?}")));
            }
            if !v.is_finite() {
                return Err(RejectReason::SchemaViolation(format!("{name} is not finite")));
            }
            if let Some((lo, hi)) = spec.range {
                if *v < lo || *v > hi {
                    return Err(RejectReason::SchemaViolation(format!("{name}={v} outside [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("no stream mapped to topic {0:?}")]
    UnknownTopic(String),
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

impl RejectReason {
    /// Counter key.
    pub fn kind(&self) -> &'static str {
        match self {
            RejectReason::UnknownTopic(_) => "unknown_topic",
            RejectReason::MalformedJson(_) => "malformed_json",
            RejectReason::SchemaViolation(_) => "schema_violation",
        }
    }
}

/// Topic to stream mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicMap {
    pub industrial: String,
    pub esp32: String,
    pub environment: String,
}

impl Default for TopicMap {
    fn default() -> Self {
        TopicMap {
            industrial: "plant/energy/industrial".into(),
            esp32: "plant/energy/esp32".into(),
            environment: "plant/env/room1".into(),
        }
    }
}

impl TopicMap {
    pub fn stream_for(&self, topic: &str) -> Option<StreamId> {
        if topic == self.industrial {
            Some(StreamId::IndustrialEnergy)
        } else if topic == self.esp32 {
            Some(StreamId::Esp32Energy)
        } else if topic == self.environment {
            Some(StreamId::Environment)
        } else {
            None
        }
    }

    pub fn topic_for(&self, stream: StreamId) -> &str {
        match stream {
            StreamId::IndustrialEnergy => &self.industrial,
            StreamId::Esp32Energy => &self.esp32,
            StreamId::Environment => &self.environment,
        }
    }
}

/// Maps, decodes and validates one message. The returned sample carries
/// `ingest_ts` and is unsequenced.
pub fn parse_payload(topics: &TopicMap, topic: &str, payload: &[u8], ingest_ts: i64) -> Result<TelemetrySample, RejectReason> {
    let stream = topics.stream_for(topic).ok_or_else(|| RejectReason::UnknownTopic(topic.to_owned()))?;
    let value: Value = serde_json::from_slice(payload).map_err(|e| RejectReason::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(RejectReason::SchemaViolation("payload is not a JSON object".into()));
    };
    let mut values = BTreeMap::new();
    let mut source_ts = None;
    for (key, v) in obj {
        if key == SOURCE_TS_KEY {
            source_ts = Some(
                v.as_i64().ok_or_else(|| RejectReason::SchemaViolation("source_ts must be an integer".into()))?,
            );
            continue;
        }
        let x = match &v {
            Value::Number(n) => n.as_f64(),
            _ => None,
        }
        .ok_or_else(|| RejectReason::SchemaViolation(format!("{key} must be a number")))?;
        values.insert(key, x);
    }
    TelemetrySample::new(stream, ingest_ts, source_ts, values)
}

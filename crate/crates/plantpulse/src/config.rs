//! System configuration: one JSON file, every key optional except what the
//! deployment needs to differ from the defaults.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use plantpulse_ingest::{TopicMap, DATA_DIR_ENV};
use plantpulse_meter_sim::{DeviceKind, EmulatorModel, EnvParams, WaveformParams, WindowSpec};
use plantpulse_monitor_api::UserSeed;
use plantpulse_mqtt::{validate_filter, validate_topic};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub log_level: String,
    pub broker: BrokerSection,
    pub meter: MeterSection,
    pub devices: DevicesSection,
    pub ingest: IngestSection,
    pub api: ApiSection,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            log_level: "info".into(),
            broker: BrokerSection::default(),
            meter: MeterSection::default(),
            devices: DevicesSection::default(),
            ingest: IngestSection::default(),
            api: ApiSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerSection {
    pub bind: SocketAddr,
}

impl Default for BrokerSection {
    fn default() -> Self {
        BrokerSection { bind: SocketAddr::from(([127, 0, 0, 1], 1883)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeterSection {
    pub bind: SocketAddr,
    pub unit: u8,
    pub registers: EmulatorModel,
    /// Seconds between emulator register updates.
    pub update_period: f64,
}

impl Default for MeterSection {
    fn default() -> Self {
        MeterSection {
            bind: SocketAddr::from(([127, 0, 0, 1], 5020)),
            unit: 1,
            registers: EmulatorModel::default(),
            update_period: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Periods {
    pub industrial: f64,
    pub esp32: f64,
    pub environment: f64,
}

impl Default for Periods {
    fn default() -> Self {
        Periods {
            industrial: DeviceKind::Industrial.default_period().as_secs_f64(),
            esp32: DeviceKind::Esp32.default_period().as_secs_f64(),
            environment: DeviceKind::Environment.default_period().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DevicesSection {
    pub topics: TopicMap,
    /// Seconds.
    pub periods: Periods,
    pub waveform: WaveformParams,
    pub window: WindowSpec,
    pub scale_v: f64,
    pub scale_i: f64,
    pub seed: u64,
    pub env: EnvParams,
}

impl Default for DevicesSection {
    fn default() -> Self {
        DevicesSection {
            topics: TopicMap::default(),
            periods: Periods::default(),
            waveform: WaveformParams::default(),
            window: WindowSpec::default(),
            scale_v: 1.0,
            scale_i: 1.0,
            seed: 7,
            env: EnvParams::default(),
        }
    }
}

impl DevicesSection {
    pub fn period(&self, kind: DeviceKind) -> Duration {
        let secs = match kind {
            DeviceKind::Industrial => self.periods.industrial,
            DeviceKind::Esp32 => self.periods.esp32,
            DeviceKind::Environment => self.periods.environment,
        };
        Duration::from_secs_f64(secs)
    }

    pub fn topic(&self, kind: DeviceKind) -> &str {
        match kind {
            DeviceKind::Industrial => &self.topics.industrial,
            DeviceKind::Esp32 => &self.topics.esp32,
            DeviceKind::Environment => &self.topics.environment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Relative paths resolve against the config file's directory.
    pub data_dir: PathBuf,
    pub filter: String,
    pub segment_bytes: u64,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            data_dir: PathBuf::from("data"),
            filter: plantpulse_ingest::service::DEFAULT_FILTER.into(),
            segment_bytes: plantpulse_ingest::store::DEFAULT_SEGMENT_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    pub bind: SocketAddr,
    pub users: Vec<UserSeed>,
    pub cors: Vec<String>,
    pub token_ttl_secs: u64,
    pub heartbeat_secs: f64,
    pub hash_iterations: u32,
}

impl Default for ApiSection {
    fn default() -> Self {
        ApiSection {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            users: Vec::new(),
            cors: Vec::new(),
            token_ttl_secs: 12 * 3600,
            heartbeat_secs: 15.0,
            hash_iterations: plantpulse_monitor_api::auth::DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl SystemConfig {
    /// Every problem found, in a stable order.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let mut binds: BTreeMap<SocketAddr, &str> = BTreeMap::new();
        for (key, addr) in [("broker.bind", self.broker.bind), ("meter.bind", self.meter.bind), ("api.bind", self.api.bind)] {
            if addr.port() == 0 {
                errors.push(format!("{key}: port 0 is not allowed"));
            }
            match binds.get(&addr) {
                Some(other) => errors.push(format!("{other} and {key} both bind {addr}")),
                None => {
                    binds.insert(addr, key);
                }
            }
        }
        if !(1..=247).contains(&self.meter.unit) {
            errors.push(format!("meter.unit: {} outside 1..=247", self.meter.unit));
        }
        if !(self.meter.update_period > 0.0 && self.meter.update_period.is_finite()) {
            errors.push(format!("meter.update_period: must be > 0, got {}", self.meter.update_period));
        }
        let d = &self.devices;
        let mut seen_topics: BTreeMap<&str, DeviceKind> = BTreeMap::new();
        for kind in DeviceKind::ALL {
            let topic = d.topic(kind);
            if let Err(e) = validate_topic(topic) {
                errors.push(format!("devices.topics.{kind}: {topic:?} is not a valid publish topic ({e})"));
            }
            if let Some(other) = seen_topics.insert(topic, kind) {
                errors.push(format!("devices.topics.{other} and devices.topics.{kind} are both {topic:?}"));
            }
        }
        for (kind, secs) in [("industrial", d.periods.industrial), ("esp32", d.periods.esp32), ("environment", d.periods.environment)] {
            if !(secs > 0.0 && secs.is_finite()) {
                errors.push(format!("devices.periods.{kind}: must be > 0, got {secs}"));
            }
        }
        if let Err(e) = d.waveform.validate() {
            errors.push(format!("devices.waveform: {e}"));
        }
        if !(d.window.sample_rate > 0.0 && d.window.cycles > 0) {
            errors.push("devices.window: sample_rate and cycles must be positive".into());
        }
        for (key, v) in [("devices.scale_v", d.scale_v), ("devices.scale_i", d.scale_i)] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{key}: must be > 0, got {v}"));
            }
        }
        if !(d.env.day_length > 0.0 && d.env.day_length.is_finite()) {
            errors.push("devices.env.day_length: must be > 0".into());
        }
        match validate_filter(&self.ingest.filter) {
            Ok(filter) => {
                for kind in DeviceKind::ALL {
                    let topic = d.topic(kind);
                    if validate_topic(topic).is_ok() && !filter.matches(topic) {
                        errors.push(format!("ingest.filter {:?} does not cover devices.topics.{kind} {topic:?}", self.ingest.filter));
                    }
                }
            }
            Err(e) => errors.push(format!("ingest.filter: {e}")),
        }
        if self.ingest.data_dir.as_os_str().is_empty() {
            errors.push("ingest.data_dir: must not be empty".into());
        }
        if self.ingest.segment_bytes < 1024 {
            errors.push(format!("ingest.segment_bytes: {} is below 1024", self.ingest.segment_bytes));
        }
        let mut names = BTreeMap::new();
        for (i, u) in self.api.users.iter().enumerate() {
            if let Some(j) = names.insert(u.user.as_str(), i) {
                errors.push(format!("api.users[{j}] and api.users[{i}] both name {:?}", u.user));
            }
            if let Err(e) = u.clone().into_account(1) {
                errors.push(format!("api.users[{i}]: {e}"));
            }
        }
        if self.api.token_ttl_secs == 0 {
            errors.push("api.token_ttl_secs: must be > 0".into());
        }
        if !(self.api.heartbeat_secs > 0.0 && self.api.heartbeat_secs.is_finite()) {
            errors.push(format!("api.heartbeat_secs: must be > 0, got {}", self.api.heartbeat_secs));
        }
        if self.api.hash_iterations == 0 {
            errors.push("api.hash_iterations: must be > 0".into());
        }
        if self.log_level.parse::<log::LevelFilter>().is_err() {
            errors.push(format!("log_level: unknown level {:?}", self.log_level));
        }
        errors
    }
}

/// Parses, fills defaults, applies the data-dir override and validates.
pub fn load_config(path: &Path) -> Result<SystemConfig, ConfigError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ConfigError::NotFound(path.to_owned())),
        Err(source) => return Err(ConfigError::Io { path: path.to_owned(), source }),
    };
    let mut config: SystemConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        config.ingest.data_dir = PathBuf::from(dir);
    }
    if config.ingest.data_dir.is_relative() {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        config.ingest.data_dir = base.join(&config.ingest.data_dir);
    }
    let errors = config.validate();
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(errors))
    }
}

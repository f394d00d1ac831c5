//! Starting each system component and reporting its health.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use plantpulse_ingest::{IngestPipeline, IngestService, Store, StoreOptions, SystemClock};
use plantpulse_meter_sim::device::Esp32Meter;
use plantpulse_meter_sim::{run_device, Bridge, Device, DeviceKind, DeviceStats, EnvModel, Pm2100Emulator};
use plantpulse_modbus::ModbusClient;
use plantpulse_monitor_api::{spawn_refresher, ApiConfig, ApiServer, AppState, HealthBoard};
use plantpulse_mqtt::broker::{Broker, BrokerConfig};
use plantpulse_mqtt::client::{Client, ClientOptions};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::config::SystemConfig;
use crate::seed::load_users;
use crate::status::{read_status, State};

const HEALTH_EVERY: Duration = Duration::from_secs(1);
const REFRESH_EVERY: Duration = Duration::from_millis(50);
const STATUS_POLL: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Broker,
    Emulator,
    Ingest,
    Bridge,
    Esp32,
    Environment,
    Api,
}

impl Component {
    /// Start order; shutdown runs in reverse.
    pub const ALL: [Component; 7] = [
        Component::Broker,
        Component::Emulator,
        Component::Ingest,
        Component::Bridge,
        Component::Esp32,
        Component::Environment,
        Component::Api,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Broker => "broker",
            Component::Emulator => "emulator",
            Component::Ingest => "ingest",
            Component::Bridge => "bridge",
            Component::Esp32 => "esp32",
            Component::Environment => "environment",
            Component::Api => "api",
        }
    }

    fn device_kind(self) -> Option<DeviceKind> {
        match self {
            Component::Bridge => Some(DeviceKind::Industrial),
            Component::Esp32 => Some(DeviceKind::Esp32),
            Component::Environment => Some(DeviceKind::Environment),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown component {0:?} (expected one of broker, emulator, ingest, bridge, esp32, environment, api)")]
pub struct UnknownComponent(pub String);

impl FromStr for Component {
    type Err = UnknownComponent;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| UnknownComponent(s.to_owned()))
    }
}

/// Parses `a,b,c` into a deduplicated list in start order.
pub fn parse_selection(s: &str) -> Result<Vec<Component>, UnknownComponent> {
    let mut picked = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        picked.push(part.parse::<Component>()?);
    }
    picked.sort();
    picked.dedup();
    Ok(picked)
}

/// Health callback: `(ok, detail)`.
pub type Report = Arc<dyn Fn(bool, String) + Send + Sync>;

/// A started component. `join` resolves with `Ok` after a requested stop
/// and with `Err` if the component died on its own.
pub struct Running {
    pub cancel: CancellationToken,
    pub join: JoinHandle<Result<(), String>>,
}

impl Running {
    pub async fn stop(self) -> Result<(), String> {
        self.cancel.cancel();
        match self.join.await {
            Ok(r) => r,
            Err(e) => Err(format!("task failed: {e}")),
        }
    }
}

fn client_options(config: &SystemConfig, component: Component) -> ClientOptions {
    let mut opts = ClientOptions::new(config.broker.bind, format!("plantpulse-{component}"));
    opts.backoff_cap = Duration::from_secs(5);
    opts
}

/// Starts `component` and returns once it is ready to serve.
pub async fn start_component(component: Component, config: Arc<SystemConfig>, report: Report) -> Result<Running, String> {
    let cancel = CancellationToken::new();
    let join = match component {
        Component::Broker => start_broker(&config, &report, cancel.clone()).await?,
        Component::Emulator => start_emulator(&config, &report, cancel.clone()).await?,
        Component::Ingest => start_ingest(&config, report, cancel.clone()).await?,
        Component::Api => start_api(&config, &report, cancel.clone()).await?,
        c => start_device(c, &config, report, cancel.clone()).await?,
    };
    Ok(Running { cancel, join })
}

async fn start_broker(config: &SystemConfig, report: &Report, cancel: CancellationToken) -> Result<JoinHandle<Result<(), String>>, String> {
    let bind = config.broker.bind;
    let broker = Broker::bind(BrokerConfig { bind, ..BrokerConfig::default() })
        .await
        .map_err(|e| format!("broker bind {bind}: {e}"))?;
    report(true, format!("listening on {}", broker.local_addr()));
    Ok(tokio::spawn(async move {
        cancel.cancelled().await;
        broker.shutdown().await;
        Ok(())
    }))
}

async fn start_emulator(config: &SystemConfig, report: &Report, cancel: CancellationToken) -> Result<JoinHandle<Result<(), String>>, String> {
    let m = &config.meter;
    let mut emulator = Pm2100Emulator::new(m.registers);
    let server = emulator.serve(m.bind, m.unit).await.map_err(|e| format!("emulator bind {}: {e}", m.bind))?;
    report(true, format!("unit {} on {}", m.unit, server.local_addr()));
    let period = Duration::from_secs_f64(m.update_period);
    Ok(tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tokio::select! {
                _ = cancel.cancelled() => break,
                _ = tick.tick() => {
                    emulator.step();
                }
            }
        }
        server.shutdown().await;
        Ok(())
    }))
}

async fn start_device(
    component: Component,
    config: &SystemConfig,
    report: Report,
    cancel: CancellationToken,
) -> Result<JoinHandle<Result<(), String>>, String> {
    let kind = component.device_kind().expect("device component");
    let d = &config.devices;
    let mut device = match kind {
        DeviceKind::Industrial => Device::Industrial(Bridge::new(ModbusClient::tcp(config.meter.bind), config.meter.unit)),
        DeviceKind::Esp32 => Device::Esp32(Esp32Meter::new(d.waveform, d.window, d.scale_v, d.scale_i, d.seed)),
        DeviceKind::Environment => Device::Environment(EnvModel::new(d.env)),
    };
    let client = Client::connect(client_options(config, component))
        .await
        .map_err(|e| format!("broker {}: {e}", config.broker.bind))?;
    let topic = d.topic(kind).to_owned();
    let period = d.period(kind);
    report(true, format!("publishing to {topic} every {period:?}"));
    Ok(tokio::spawn(async move {
        let stats = DeviceStats::default();
        let run = run_device(&mut device, &topic, period, &client, &stats, cancel.clone());
        let monitor = async {
            let mut last_failed = 0;
            let mut tick = tokio::time::interval(HEALTH_EVERY);
            loop {
                tick.tick().await;
                let failed = stats.failed.load(Ordering::Relaxed);
                let connected = client.is_connected();
                let ok = connected && failed == last_failed;
                last_failed = failed;
                report(ok, format!("published={} failed={failed} connected={connected}", stats.published()));
            }
        };
        tokio::select! {
            _ = run => {}
            _ = monitor => {}
        }
        client.disconnect().await;
        Ok(())
    }))
}

async fn start_ingest(config: &SystemConfig, report: Report, cancel: CancellationToken) -> Result<JoinHandle<Result<(), String>>, String> {
    let dir = config.ingest.data_dir.clone();
    let opts = StoreOptions { segment_bytes: config.ingest.segment_bytes, read_only: false };
    let store = tokio::task::spawn_blocking(move || Store::open_with(dir, opts))
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| format!("store: {e}"))?;
    let recovered = store.recovery_stats().clone();
    let store = Arc::new(store);
    let pipeline = Arc::new(IngestPipeline::new(store.clone(), config.devices.topics.clone(), Arc::new(SystemClock)));
    let service = IngestService::start(pipeline, client_options(config, Component::Ingest), &config.ingest.filter)
        .await
        .map_err(|e| format!("subscribe {}: {e}", config.ingest.filter))?;
    report(
        true,
        format!("subscribed to {}; recovered truncated_bytes={}", config.ingest.filter, recovered.truncated_bytes),
    );
    Ok(tokio::spawn(async move {
        let mut tick = tokio::time::interval(HEALTH_EVERY);
        loop {
            tokio::select! {
                _ = cancel.cancelled() => break,
                _ = tick.tick() => {
                    let s = service.stats();
                    let failure = store.failure();
                    let ok = failure.is_none() && service.is_connected();
                    let mut detail = format!("received={} stored={} rejected={}", s.received, s.stored, s.rejected_total());
                    if let Some(f) = failure {
                        detail.push_str(&format!(" store_failed={f}"));
                    }
                    report(ok, detail);
                }
            }
        }
        service.stop().await;
        Ok(())
    }))
}

async fn start_api(config: &SystemConfig, report: &Report, cancel: CancellationToken) -> Result<JoinHandle<Result<(), String>>, String> {
    let users = load_users(config).map_err(|e| e.to_string())?;
    if users.is_empty() {
        log::warn!("api_no_users - nobody can log in; add api.users or run seed");
    }
    let dir = config.ingest.data_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let reader_dir = dir.clone();
    let store = tokio::task::spawn_blocking(move || Store::open_reader(reader_dir))
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| format!("store: {e}"))?;
    let store = Arc::new(store);
    let api = &config.api;
    let api_config = ApiConfig {
        token_ttl: Duration::from_secs(api.token_ttl_secs),
        heartbeat: Duration::from_secs_f64(api.heartbeat_secs),
        cors_origins: api.cors.clone(),
        hash_iterations: api.hash_iterations,
        ..ApiConfig::default()
    };
    let health = Arc::new(HealthBoard::default());
    let state = AppState::new(store.clone(), users, api_config, health.clone());
    let server = ApiServer::bind(api.bind, state).await.map_err(|e| format!("api bind {}: {e}", api.bind))?;
    let refresher = spawn_refresher(store, REFRESH_EVERY, cancel.child_token());
    let poller = tokio::spawn(poll_status(dir, health, cancel.child_token()));
    report(true, format!("serving on {}", server.local_addr()));
    Ok(tokio::spawn(async move {
        cancel.cancelled().await;
        server.shutdown().await;
        let _ = refresher.await;
        let _ = poller.await;
        Ok(())
    }))
}

/// Mirrors the supervisor's status file into the API's health board.
async fn poll_status(dir: std::path::PathBuf, health: Arc<HealthBoard>, cancel: CancellationToken) {
    let mut tick = tokio::time::interval(STATUS_POLL);
    loop {
        tokio::select! {
            _ = cancel.cancelled() => return,
            _ = tick.tick() => {}
        }
        let Ok(status) = read_status(&dir) else { continue };
        for (name, c) in status.components {
            let state = serde_json::to_value(c.state).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            let ok = c.ok && c.state == State::Running;
            let detail = if c.detail.is_empty() { state } else { format!("{state}: {}", c.detail) };
            health.set(&name, ok, detail);
        }
    }
}

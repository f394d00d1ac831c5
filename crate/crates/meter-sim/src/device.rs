//! Periodic device loops.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, info, warn};
use plantpulse_mqtt::client::Client;
use plantpulse_mqtt::QoS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::time::{interval_at, Instant, MissedTickBehavior};
use tokio_util::sync::CancellationToken;

use crate::bridge::Bridge;
use crate::env::EnvModel;
use crate::power::{compute_power, PowerReading};
use crate::waveform::{synth_window, WaveformParams, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Industrial,
    Esp32,
    Environment,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 3] = [DeviceKind::Industrial, DeviceKind::Esp32, DeviceKind::Environment];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Industrial => "industrial",
            DeviceKind::Esp32 => "esp32",
            DeviceKind::Environment => "environment",
        }
    }

    pub fn default_period(self) -> Duration {
        match self {
            DeviceKind::Industrial => Duration::from_secs(5),
            DeviceKind::Esp32 => Duration::from_secs(4),
            DeviceKind::Environment => Duration::from_secs(10),
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown device kind {s:?}"))
    }
}

/// ESP32-style meter: samples a window, scales it and computes power.
pub struct Esp32Meter {
    pub params: WaveformParams,
    pub spec: WindowSpec,
    pub scale_v: f64,
    pub scale_i: f64,
    rng: ChaCha8Rng,
}

impl Esp32Meter {
    pub fn new(params: WaveformParams, spec: WindowSpec, scale_v: f64, scale_i: f64, seed: u64) -> Self {
        Esp32Meter { params, spec, scale_v, scale_i, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn read(&mut self, t: f64) -> PowerReading {
        let mut w = synth_window(&self.params, &self.spec, t, &mut self.rng);
        w.v.iter_mut().for_each(|x| *x *= self.scale_v);
        w.i.iter_mut().for_each(|x| *x *= self.scale_i);
        compute_power(&w).expect("whole-cycle window is never empty")
    }
}

pub enum Device {
    Industrial(Bridge),
    Esp32(Esp32Meter),
    Environment(EnvModel),
}

impl Device {
    pub fn kind(&self) -> DeviceKind {
        match self {
            Device::Industrial(_) => DeviceKind::Industrial,
            Device::Esp32(_) => DeviceKind::Esp32,
            Device::Environment(_) => DeviceKind::Environment,
        }
    }

    /// Produces the next JSON payload, or `None` when the reading failed.
    pub async fn sample(&mut self, now_ms: i64) -> Option<Vec<u8>> {
        let t = now_ms as f64 / 1000.0;
        let value = match self {
            Device::Industrial(bridge) => return bridge.poll().await.ok().map(|r| r.payload(now_ms)),
            Device::Esp32(meter) => {
                let r = meter.read(t);
                serde_json::json!({ "voltage": r.v_rms, "current": r.i_rms, "source_ts": now_ms })
            }
            Device::Environment(model) => {
                let r = model.tick(t);
                serde_json::json!({
                    "temperature_c": r.temperature_c,
                    "humidity_pct": r.humidity_pct,
                    "source_ts": now_ms,
                })
            }
        };
        Some(serde_json::to_vec(&value).expect("json"))
    }
}

pub trait Publisher: Send + Sync {
    fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<(), String>;
}

impl Publisher for Client {
    fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<(), String> {
        Client::publish(self, topic, payload, QoS::AtLeastOnce).map(drop).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Default)]
pub struct DeviceStats {
    pub published: AtomicU64,
    pub failed: AtomicU64,
    pub last_payload: Mutex<Option<Vec<u8>>>,
}

impl DeviceStats {
    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    pub fn failed(&self) -> u64 {
        self.failed.load(Ordering::Relaxed)
    }

    pub fn last_payload(&self) -> Option<Vec<u8>> {
        self.last_payload.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Samples and publishes once per `period` until `cancel` fires. The first
/// reading is taken one full period after start, like a sensor completing
/// its first measurement interval.
pub async fn run_device<P: Publisher + ?Sized>(
    device: &mut Device,
    topic: &str,
    period: Duration,
    publisher: &P,
    stats: &DeviceStats,
    cancel: CancellationToken,
) {
    let kind = device.kind();
    info!("device_started - kind={kind} topic={topic} period={period:?}");
    let mut ticker = interval_at(Instant::now() + period, period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = cancel.cancelled() => break,
            _ = ticker.tick() => {}
        }
        let Some(payload) = device.sample(crate::now_ms()).await else {
            stats.failed.fetch_add(1, Ordering::Relaxed);
            continue;
        };
        match publisher.publish(topic, payload.clone()) {
            Ok(()) => {
                stats.published.fetch_add(1, Ordering::Relaxed);
                debug!("published - kind={kind} {}", String::from_utf8_lossy(&payload));
                *stats.last_payload.lock().unwrap_or_else(|e| e.into_inner()) = Some(payload);
            }
            Err(e) => {
                stats.failed.fetch_add(1, Ordering::Relaxed);
                warn!("publish_failed - kind={kind} {e}");
            }
        }
    }
    info!("device_stopped - kind={kind} published={}", stats.published());
}

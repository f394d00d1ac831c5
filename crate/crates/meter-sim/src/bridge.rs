//! PM2100 emulator and the Modbus to MQTT bridge.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use log::warn;
use plantpulse_modbus::registers::pm2100;
use plantpulse_modbus::{ModbusClient, ModbusServer, PollError, RegisterMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Operating point of the emulated single-aggregate industrial load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorModel {
    pub voltage_v: f64,
    pub current_a: f64,
    pub power_factor: f64,
    /// Relative standard deviation applied to current per step.
    pub noise: f64,
    pub seed: u64,
}

impl Default for EmulatorModel {
    fn default() -> Self {
        // 230 V x 4.6 A x 0.9 ~= 0.95 kW.
        EmulatorModel { voltage_v: 230.0, current_a: 4.6, power_factor: 0.9, noise: 0.005, seed: 1 }
    }
}

/// Register bank plus the process that keeps refreshing it.
pub struct Pm2100Emulator {
    model: EmulatorModel,
    rng: ChaCha8Rng,
    map: Arc<RwLock<RegisterMap>>,
}

impl Pm2100Emulator {
    pub fn new(model: EmulatorModel) -> Self {
        let mut emu = Pm2100Emulator {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
            map: Arc::new(RwLock::new(RegisterMap::pm2100())),
        };
        emu.write(model.voltage_v, model.current_a, model.power_factor);
        emu
    }

    pub fn map(&self) -> Arc<RwLock<RegisterMap>> {
        self.map.clone()
    }

    fn write(&mut self, v: f64, i: f64, pf: f64) -> f32 {
        let kw = (v * i * pf / 1000.0) as f32;
        let mut map = self.map.write().unwrap_or_else(|e| e.into_inner());
        map.set_float(pm2100::VOLTAGE, v as f32).expect("pm2100 field");
        map.set_float(pm2100::CURRENT, i as f32).expect("pm2100 field");
        map.set_float(pm2100::PF, pf as f32).expect("pm2100 field");
        map.set_float(pm2100::POWER, kw).expect("pm2100 field");
        kw
    }

    /// Draws a new operating point and returns the power written, kW.
    pub fn step(&mut self) -> f32 {
        let n: f64 = StandardNormal.sample(&mut self.rng);
        let i = (self.model.current_a * (1.0 + self.model.noise * n)).max(0.0);
        let (v, pf) = (self.model.voltage_v, self.model.power_factor);
        self.write(v, i, pf)
    }

    /// Serves the bank as RTU unit `unit` on `addr`.
    pub async fn serve(&self, addr: SocketAddr, unit: u8) -> std::io::Result<ModbusServer> {
        ModbusServer::bind(addr, unit, self.map.clone()).await
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeReading {
    pub power_kw: f32,
    pub voltage_v: f32,
    pub current_a: f32,
    pub power_factor: f32,
}

/// The f64 whose shortest decimal form matches that of `x`, so a register
/// value of 0.95f32 is published as 0.95 rather than 0.949999988079071.
pub fn f32_to_decimal(x: f32) -> f64 {
    x.to_string().parse().expect("f32 display is a valid f64")
}

impl BridgeReading {
    pub fn payload(&self, source_ts: i64) -> Vec<u8> {
        serde_json::to_vec(&serde_json::json!({
            "power_kw": f32_to_decimal(self.power_kw),
            "source_ts": source_ts,
        }))
        .expect("json")
    }
}

pub struct Bridge {
    client: ModbusClient,
    unit: u8,
    errors: Arc<AtomicU64>,
}

impl Bridge {
    pub fn new(client: ModbusClient, unit: u8) -> Self {
        Bridge { client, unit, errors: Arc::new(AtomicU64::new(0)) }
    }

    pub fn error_count(&self) -> u64 {
        self.errors.load(Ordering::Relaxed)
    }

    pub fn error_counter(&self) -> Arc<AtomicU64> {
        self.errors.clone()
    }

    /// Reads all four quantities. Any failure counts one error.
    pub async fn poll(&mut self) -> Result<BridgeReading, PollError> {
        let res = self.read_all().await;
        if let Err(e) = &res {
            self.errors.fetch_add(1, Ordering::Relaxed);
            warn!("bridge_poll_failed - unit={} {e}", self.unit);
        }
        res
    }

    async fn read_all(&mut self) -> Result<BridgeReading, PollError> {
        Ok(BridgeReading {
            power_kw: self.client.read_float32(self.unit, pm2100::POWER_KW).await?,
            voltage_v: self.client.read_float32(self.unit, pm2100::VOLTAGE_V).await?,
            current_a: self.client.read_float32(self.unit, pm2100::CURRENT_A).await?,
            power_factor: self.client.read_float32(self.unit, pm2100::POWER_FACTOR).await?,
        })
    }
}

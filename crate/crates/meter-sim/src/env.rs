//! Temperature and humidity sensor model.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const TEMP_RANGE: (f64, f64) = (-40.0, 80.0);
pub const HUMIDITY_RANGE: (f64, f64) = (0.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub temp_base: f64,
    pub temp_amplitude: f64,
    pub temp_noise: f64,
    pub humidity_base: f64,
    pub humidity_amplitude: f64,
    pub humidity_noise: f64,
    /// Length of the daily cycle, seconds.
    pub day_length: f64,
    /// Seconds into the cycle at which temperature peaks.
    pub peak_offset: f64,
    pub seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            temp_base: 25.0,
            temp_amplitude: 3.0,
            temp_noise: 0.2,
            humidity_base: 60.0,
            humidity_amplitude: 8.0,
            humidity_noise: 1.0,
            day_length: 86_400.0,
            peak_offset: 15.0 * 3600.0,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvReading {
    pub temperature_c: f64,
    pub humidity_pct: f64,
    /// Seconds.
    pub timestamp: f64,
}

pub struct EnvModel {
    params: EnvParams,
    rng: ChaCha8Rng,
}

impl EnvModel {
    pub fn new(params: EnvParams) -> Self {
        EnvModel { rng: ChaCha8Rng::seed_from_u64(params.seed), params }
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    /// Reading at `t` seconds. Humidity moves opposite to temperature.
    pub fn tick(&mut self, t: f64) -> EnvReading {
        let p = &self.params;
        let phase = (TAU * (t - p.peak_offset) / p.day_length).cos();
        let nt: f64 = StandardNormal.sample(&mut self.rng);
        let nh: f64 = StandardNormal.sample(&mut self.rng);
        let temperature = p.temp_base + p.temp_amplitude * phase + p.temp_noise * nt;
        let humidity = p.humidity_base - p.humidity_amplitude * phase + p.humidity_noise * nh;
        EnvReading {
            temperature_c: temperature.clamp(TEMP_RANGE.0, TEMP_RANGE.1),
            humidity_pct: humidity.clamp(HUMIDITY_RANGE.0, HUMIDITY_RANGE.1),
            timestamp: t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_model_is_exact() {
        let params = EnvParams { temp_amplitude: 0.0, temp_noise: 0.0, ..Default::default() };
        let mut m = EnvModel::new(params);
        for t in 0..50 {
            assert_eq!(m.tick(f64::from(t) * 977.0).temperature_c, 25.0);
        }
    }

    #[test]
    fn humidity_clamped() {
        let params = EnvParams { humidity_base: 99.0, humidity_amplitude: 0.0, humidity_noise: 5.0, ..Default::default() };
        let mut m = EnvModel::new(params);
        let readings: Vec<f64> = (0..200).map(|t| m.tick(f64::from(t)).humidity_pct).collect();
        assert!(readings.contains(&100.0));
        assert!(readings.iter().all(|h| (0.0..=100.0).contains(h)));
    }

    #[test]
    fn temperature_clamped() {
        let params = EnvParams { temp_base: 79.0, temp_noise: 10.0, ..Default::default() };
        let mut m = EnvModel::new(params);
        assert!((0..200).map(|t| m.tick(f64::from(t)).temperature_c).all(|x| (-40.0..=80.0).contains(&x)));
    }

    #[test]
    fn seeded_runs_reproduce() {
        let run = || {
            let mut m = EnvModel::new(EnvParams::default());
            (0..100).map(|t| m.tick(f64::from(t) * 10.0)).map(|r| (r.temperature_c.to_bits(), r.humidity_pct.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

//! Synthetic mains voltage and current waveforms.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformParams {
    pub v_peak: f64,
    pub i_peak: f64,
    pub frequency: f64,
    /// Current lag behind voltage, radians in `[0, 2π)`.
    pub phase: f64,
    /// Noise standard deviation as a fraction of each peak.
    pub noise: f64,
    /// Peak modulation depth as a fraction.
    pub drift_amplitude: f64,
    pub drift_period: f64,
}

impl Default for WaveformParams {
    fn default() -> Self {
        // Around the magnitudes shown for the ESP32 meter: ~14.8 V, ~0.77 A rms.
        WaveformParams {
            v_peak: 20.94,
            i_peak: 1.086,
            frequency: 50.0,
            phase: 0.2,
            noise: 0.01,
            drift_amplitude: 0.02,
            drift_period: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid waveform parameter {field}: {value}")]
pub struct InvalidParams {
    pub field: &'static str,
    pub value: f64,
}

impl WaveformParams {
    pub fn noiseless(v_peak: f64, i_peak: f64, phase: f64) -> Self {
        WaveformParams { v_peak, i_peak, phase, noise: 0.0, drift_amplitude: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), InvalidParams> {
        let checks: [(&'static str, f64, bool); 7] = [
            ("v_peak", self.v_peak, self.v_peak >= 0.0),
            ("i_peak", self.i_peak, self.i_peak >= 0.0),
            ("frequency", self.frequency, self.frequency > 0.0),
            ("phase", self.phase, (0.0..TAU).contains(&self.phase)),
            ("noise", self.noise, self.noise >= 0.0),
            ("drift_amplitude", self.drift_amplitude, (0.0..1.0).contains(&self.drift_amplitude)),
            ("drift_period", self.drift_period, self.drift_period > 0.0),
        ];
        for (field, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(InvalidParams { field, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub sample_rate: f64,
    pub cycles: u32,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { sample_rate: 2000.0, cycles: 10 }
    }
}

impl WindowSpec {
    /// Samples covering `cycles` whole periods at `frequency`.
    pub fn len(&self, frequency: f64) -> usize {
        (self.sample_rate * f64::from(self.cycles) / frequency).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformWindow {
    pub sample_rate: f64,
    pub t0: f64,
    pub v: Vec<f64>,
    pub i: Vec<f64>,
}

/// Samples `v = Vp sin(2πft)` and `i = Ip sin(2πft - φ)` from `t0`
/// seconds, with drift on both peaks and i.i.d. Gaussian noise.
pub fn synth_window<R: Rng + ?Sized>(params: &WaveformParams, spec: &WindowSpec, t0: f64, rng: &mut R) -> WaveformWindow {
    let n = spec.len(params.frequency);
    let mut v = Vec::with_capacity(n);
    let mut i = Vec::with_capacity(n);
    let w = TAU * params.frequency;
    for k in 0..n {
        let t = t0 + k as f64 / spec.sample_rate;
        let drift = 1.0 + params.drift_amplitude * (TAU * t / params.drift_period).sin();
        let (vp, ip) = (params.v_peak * drift, params.i_peak * drift);
        let mut vs = vp * (w * t).sin();
        let mut is = ip * (w * t - params.phase).sin();
        if params.noise > 0.0 {
            let nv: f64 = StandardNormal.sample(rng);
            let ni: f64 = StandardNormal.sample(rng);
            vs += nv * params.noise * params.v_peak;
            is += ni * params.noise * params.i_peak;
        }
        v.push(vs);
        i.push(is);
    }
    WaveformWindow { sample_rate: spec.sample_rate, t0, v, i }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn whole_cycle_length() {
        let spec = WindowSpec::default();
        assert_eq!(spec.len(50.0), 400);
        assert_eq!(spec.len(60.0), 333);
    }

    #[test]
    fn pure_sine_bound() {
        let p = WaveformParams::noiseless(10.0, 1.0, 0.0);
        let w = synth_window(&p, &WindowSpec::default(), 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let max = w.v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!((9.99..=10.0).contains(&max), "{max}");
    }

    #[test]
    fn same_seed_same_window() {
        let p = WaveformParams::default();
        let a = synth_window(&p, &WindowSpec::default(), 3.5, &mut ChaCha8Rng::seed_from_u64(42));
        let b = synth_window(&p, &WindowSpec::default(), 3.5, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        let c = synth_window(&p, &WindowSpec::default(), 3.5, &mut ChaCha8Rng::seed_from_u64(43));
        assert_ne!(a, c);
    }

    #[test]
    fn antiphase_current() {
        let p = WaveformParams::noiseless(10.0, 2.0, PI);
        let w = synth_window(&p, &WindowSpec::default(), 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        for (v, i) in w.v.iter().zip(&w.i) {
            assert!((i + v * 0.2).abs() < 1e-12, "{v} {i}");
        }
    }

    #[test]
    fn validation() {
        assert!(WaveformParams::default().validate().is_ok());
        let bad = WaveformParams { phase: TAU, ..Default::default() };
        assert_eq!(bad.validate().unwrap_err().field, "phase");
        let bad = WaveformParams { frequency: 0.0, ..Default::default() };
        assert_eq!(bad.validate().unwrap_err().field, "frequency");
        let bad = WaveformParams { i_peak: -1.0, ..Default::default() };
        assert_eq!(bad.validate().unwrap_err().field, "i_peak");
    }
}

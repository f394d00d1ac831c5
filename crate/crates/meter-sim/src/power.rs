//! RMS, active and apparent power over a sampled window.

use serde::Serialize;
use thiserror::Error;

use crate::waveform::WaveformWindow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerReading {
    pub v_rms: f64,
    pub i_rms: f64,
    pub p_active: f64,
    pub s_apparent: f64,
    pub power_factor: f64,
    /// Window start, seconds.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PowerError {
    #[error("empty window")]
    EmptyWindow,
    #[error("voltage and current lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

pub fn compute_power(w: &WaveformWindow) -> Result<PowerReading, PowerError> {
    if w.v.len() != w.i.len() {
        return Err(PowerError::LengthMismatch(w.v.len(), w.i.len()));
    }
    if w.v.is_empty() {
        return Err(PowerError::EmptyWindow);
    }
    let (mut vv, mut ii, mut vi) = (Sum::default(), Sum::default(), Sum::default());
    for (&v, &i) in w.v.iter().zip(&w.i) {
        vv.add(v * v);
        ii.add(i * i);
        vi.add(v * i);
    }
    let n = w.v.len() as f64;
    let v_rms = (vv.value() / n).sqrt();
    let i_rms = (ii.value() / n).sqrt();
    let p_active = vi.value() / n;
    let s_apparent = v_rms * i_rms;
    let power_factor = if s_apparent > 0.0 { (p_active / s_apparent).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(PowerReading { v_rms, i_rms, p_active, s_apparent, power_factor, timestamp: w.t0 })
}

//! Software stand-ins for the plant's three devices.

pub mod bridge;
pub mod device;
pub mod env;
pub mod power;
pub mod waveform;

pub use bridge::{Bridge, BridgeReading, EmulatorModel, Pm2100Emulator};
pub use device::{run_device, Device, DeviceKind, DeviceStats, Publisher};
pub use env::{EnvModel, EnvParams, EnvReading};
pub use power::{compute_power, PowerError, PowerReading};
pub use waveform::{synth_window, WaveformParams, WaveformWindow, WindowSpec};

pub(crate) fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

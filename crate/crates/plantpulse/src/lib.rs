//! Configuration, seeding and supervision for the whole monitoring system.
//!
//! The `plantpulse` binary wraps these: `run`, `seed` and `check-config`.

pub mod components;
pub mod config;
pub mod seed;
pub mod status;
pub mod supervisor;

pub use components::{parse_selection, start_component, Component, Report, Running};
pub use config::{load_config, ConfigError, SystemConfig};
pub use seed::{load_users, seed, SeedError, SeedReport};
pub use status::{read_status, ComponentStatus, State, StatusFile};
pub use supervisor::{Mode, Outcome, Supervisor, SupervisorOptions};

/// Exit code for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for startup failures and crash loops.
pub const EXIT_FAILURE: i32 = 1;

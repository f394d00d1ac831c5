//! HTTP surface of the monitoring system.
//!
//! | route | auth |
//! |---|---|
//! | `POST /api/login` | none |
//! | `GET /api/streams` | bearer |
//! | `GET /api/streams/{id}/latest` | bearer |
//! | `GET /api/streams/{id}/range?from=&to=&limit=&order=&cursor=` | bearer |
//! | `GET /api/live?streams=a,b` | bearer |
//! | `GET /api/users` | bearer, admin |
//! | `GET /healthz` | none |

pub mod auth;
pub mod live;
pub mod routes;
pub mod server;

pub use auth::{hash_password, verify_password, Role, UserAccount, UserSeed};
pub use routes::{router, AppState};
pub use server::{spawn_refresher, ApiConfig, ApiServer, HealthBoard};

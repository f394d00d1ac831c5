//! Listener lifecycle, configuration and health reporting.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{info, warn};
use plantpulse_ingest::Store;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::auth::DEFAULT_ITERATIONS;
use crate::routes::{router, AppState};

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub token_ttl: Duration,
    pub heartbeat: Duration,
    pub cors_origins: Vec<String>,
    pub max_login_failures: usize,
    pub login_window: Duration,
    pub hash_iterations: u32,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            token_ttl: Duration::from_secs(12 * 3600),
            heartbeat: Duration::from_secs(15),
            cors_origins: Vec::new(),
            max_login_failures: 10,
            login_window: Duration::from_secs(60),
            hash_iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComponentHealth {
    pub ok: bool,
    pub detail: String,
}

/// Component statuses reported by whoever hosts the API.
#[derive(Debug, Default)]
pub struct HealthBoard(Mutex<BTreeMap<String, ComponentHealth>>);

impl HealthBoard {
    pub fn set(&self, component: &str, ok: bool, detail: impl Into<String>) {
        self.0
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(component.to_owned(), ComponentHealth { ok, detail: detail.into() });
    }

    pub fn snapshot(&self) -> BTreeMap<String, ComponentHealth> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub struct ApiServer {
    local_addr: SocketAddr,
    cancel: CancellationToken,
    task: Option<JoinHandle<io::Result<()>>>,
}

impl ApiServer {
    pub async fn bind(addr: SocketAddr, state: AppState) -> io::Result<ApiServer> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let cancel = state.cancel_token();
        let app = router(state);
        let task = tokio::spawn({
            let cancel = cancel.clone();
            async move { axum::serve(listener, app).with_graceful_shutdown(cancel.cancelled_owned()).await }
        });
        info!("api_listening - {local_addr}");
        Ok(ApiServer { local_addr, cancel, task: Some(task) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Ends live streams and waits for in-flight requests.
    pub async fn shutdown(mut self) {
        self.cancel.cancel();
        if let Some(task) = self.task.take() {
            match task.await {
                Ok(Err(e)) => warn!("api_serve_error - {e}"),
                Err(e) => warn!("api_task_failed - {e}"),
                Ok(Ok(())) => {}
            }
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

/// Polls a read-only store for records written by another process.
pub fn spawn_refresher(store: Arc<Store>, every: Duration, cancel: CancellationToken) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = cancel.cancelled() => return,
                _ = tick.tick() => {}
            }
            let s = store.clone();
            match tokio::task::spawn_blocking(move || s.refresh()).await {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => warn!("refresh_failed - {e}"),
                Err(e) => warn!("refresh_panicked - {e}"),
            }
        }
    })
}

//! `status.json`: the supervisor's view of every component, rewritten on
//! each change and read by the API for `/healthz`.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub const STATUS_FILE: &str = "status.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Starting,
    Running,
    Restarting,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentStatus {
    pub state: State,
    pub ok: bool,
    pub detail: String,
    pub restarts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<u32>,
}

impl Default for ComponentStatus {
    fn default() -> Self {
        ComponentStatus { state: State::Starting, ok: false, detail: String::new(), restarts: 0, pid: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusFile {
    pub supervisor_pid: u32,
    pub updated_ms: i64,
    pub components: BTreeMap<String, ComponentStatus>,
}

pub fn status_path(data_dir: &Path) -> PathBuf {
    data_dir.join(STATUS_FILE)
}

pub fn read_status(data_dir: &Path) -> io::Result<StatusFile> {
    let bytes = std::fs::read(status_path(data_dir))?;
    serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Writes via a temp file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)
}

/// In-memory status mirrored to disk on every update.
pub struct StatusBoard {
    path: PathBuf,
    inner: Mutex<StatusFile>,
}

impl StatusBoard {
    pub fn new(data_dir: &Path, components: &[&str]) -> io::Result<StatusBoard> {
        std::fs::create_dir_all(data_dir)?;
        let file = StatusFile {
            supervisor_pid: std::process::id(),
            updated_ms: 0,
            components: components.iter().map(|c| (c.to_string(), ComponentStatus::default())).collect(),
        };
        let board = StatusBoard { path: status_path(data_dir), inner: Mutex::new(file) };
        board.update(|_| {});
        Ok(board)
    }

    pub fn update(&self, f: impl FnOnce(&mut StatusFile)) {
        let mut file = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut file);
        file.updated_ms = now_ms();
        let bytes = serde_json::to_vec_pretty(&*file).expect("status serializes");
        if let Err(e) = write_atomic(&self.path, &bytes) {
            log::warn!("status_write_failed - {}: {e}", self.path.display());
        }
    }

    pub fn component(&self, name: &str, f: impl FnOnce(&mut ComponentStatus)) {
        self.update(|file| f(file.components.entry(name.to_owned()).or_default()));
    }

    pub fn snapshot(&self) -> StatusFile {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub(crate) fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

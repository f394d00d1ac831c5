//! Data-directory initialisation: the user table and optional fixture rows.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use plantpulse_ingest::fixture::{load_fixture, FixtureError};
use plantpulse_ingest::{Store, StoreError, StoreOptions, StreamId};
use plantpulse_monitor_api::UserAccount;
use thiserror::Error;

use crate::config::SystemConfig;
use crate::status::{write_atomic, STATUS_FILE};

pub const USERS_FILE: &str = "users.json";

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("{} is already initialised ({reason}); pass --force to overwrite", .dir.display())]
    RefusesOverwrite { dir: PathBuf, reason: String },
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("fixture {}: {source}", .path.display())]
    Fixture { path: PathBuf, source: FixtureError },
    #[error("users: {0}")]
    Users(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedReport {
    pub data_dir: PathBuf,
    pub users: usize,
    pub samples: BTreeMap<StreamId, usize>,
}

pub fn users_path(data_dir: &Path) -> PathBuf {
    data_dir.join(USERS_FILE)
}

/// Hashes the configured users. Plaintext passwords never reach disk.
pub fn hash_users(config: &SystemConfig) -> Result<Vec<UserAccount>, SeedError> {
    config
        .api
        .users
        .iter()
        .map(|u| u.clone().into_account(config.api.hash_iterations).map_err(|e| SeedError::Users(e.to_string())))
        .collect()
}

/// The seeded user table, with configured users not present in it added.
pub fn load_users(config: &SystemConfig) -> Result<Vec<UserAccount>, SeedError> {
    let mut users: Vec<UserAccount> = match fs::read(users_path(&config.ingest.data_dir)) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| SeedError::Users(format!("{USERS_FILE}: {e}")))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    for account in hash_users(config)? {
        if !users.iter().any(|u| u.user == account.user) {
            users.push(account);
        }
    }
    Ok(users)
}

fn existing_state(dir: &Path) -> Result<Option<String>, SeedError> {
    if users_path(dir).exists() {
        return Ok(Some(format!("{USERS_FILE} exists")));
    }
    if !dir.join("MANIFEST").exists() {
        return Ok(None);
    }
    let store = Store::open_reader(dir)?;
    let total: usize = StreamId::ALL.iter().map(|&s| store.count(s)).sum();
    Ok((total > 0).then(|| format!("store holds {total} samples")))
}

fn clear(dir: &Path) -> io::Result<()> {
    for stream in StreamId::ALL {
        match fs::remove_dir_all(dir.join(stream.as_str())) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
    }
    for name in ["MANIFEST", USERS_FILE, STATUS_FILE] {
        match fs::remove_file(dir.join(name)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
    }
    Ok(())
}

/// Creates the store, writes hashed users and appends fixture rows. Must
/// not run while the system is using the same data directory.
pub fn seed(config: &SystemConfig, fixture: Option<&Path>, force: bool) -> Result<SeedReport, SeedError> {
    let dir = &config.ingest.data_dir;
    let fixture_samples = match fixture {
        Some(path) => {
            let file = fs::File::open(path)?;
            load_fixture(file).map_err(|source| SeedError::Fixture { path: path.to_owned(), source })?
        }
        None => Vec::new(),
    };
    let users = hash_users(config)?;
    if let Some(reason) = existing_state(dir)? {
        if !force {
            return Err(SeedError::RefusesOverwrite { dir: dir.clone(), reason });
        }
        log::warn!("seed_overwrite - {}: {reason}", dir.display());
        clear(dir)?;
    }
    let store = Store::open_with(dir, StoreOptions { segment_bytes: config.ingest.segment_bytes, read_only: false })?;
    for stream in StreamId::ALL {
        fs::create_dir_all(dir.join(stream.as_str()))?;
    }
    let mut samples = BTreeMap::new();
    for sample in fixture_samples {
        let stream = sample.stream;
        store.append(sample)?;
        *samples.entry(stream).or_insert(0) += 1;
    }
    store.sync()?;
    let body = serde_json::to_vec_pretty(&users).expect("users serialize");
    write_atomic(&users_path(dir), &body)?;
    Ok(SeedReport { data_dir: dir.clone(), users: users.len(), samples })
}

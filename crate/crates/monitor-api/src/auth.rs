//! Password hashing, sessions and login throttling.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const HASH_SCHEME: &str = "iter-sha256";
pub const DEFAULT_ITERATIONS: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    Viewer,
}

/// Stored account. Only the hash is kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user: String,
    pub password_hash: String,
    pub role: Role,
}

/// Account as written in configuration: either a plaintext password,
/// hashed on load, or a ready hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSeed {
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password_hash: Option<String>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeedError {
    #[error("user {0:?}: exactly one of password and password_hash is required")]
    Credential(String),
    #[error("user {0:?}: malformed password hash")]
    BadHash(String),
    #[error("user name must be non-empty")]
    EmptyName,
}

impl UserSeed {
    pub fn into_account(self, iterations: u32) -> Result<UserAccount, SeedError> {
        if self.user.is_empty() {
            return Err(SeedError::EmptyName);
        }
        let password_hash = match (self.password, self.password_hash) {
            (Some(p), None) => hash_password(&p, iterations),
            (None, Some(h)) if parse_hash(&h).is_some() => h,
            (None, Some(_)) => return Err(SeedError::BadHash(self.user)),
            _ => return Err(SeedError::Credential(self.user)),
        };
        Ok(UserAccount { user: self.user, password_hash, role: self.role })
    }
}

fn digest(salt: &[u8], password: &[u8], iterations: u32) -> [u8; 32] {
    let mut h: [u8; 32] = Sha256::new().chain_update(salt).chain_update(password).finalize().into();
    for _ in 1..iterations {
        h = Sha256::new().chain_update(h).chain_update(salt).finalize().into();
    }
    h
}

/// `iter-sha256$<iterations>$<salt hex>$<hash hex>` with a fresh 16-byte salt.
pub fn hash_password(password: &str, iterations: u32) -> String {
    let mut salt = [0u8; 16];
    rand::rng().fill_bytes(&mut salt);
    hash_with_salt(password, &salt, iterations)
}

pub fn hash_with_salt(password: &str, salt: &[u8], iterations: u32) -> String {
    let iterations = iterations.max(1);
    let h = digest(salt, password.as_bytes(), iterations);
    format!("{HASH_SCHEME}${iterations}${}${}", hex::encode(salt), hex::encode(h))
}

fn parse_hash(stored: &str) -> Option<(u32, Vec<u8>, Vec<u8>)> {
    let mut parts = stored.split('$');
    if parts.next()? != HASH_SCHEME {
        return None;
    }
    let iterations: u32 = parts.next()?.parse().ok().filter(|&n| n > 0)?;
    let salt = hex::decode(parts.next()?).ok()?;
    let hash = hex::decode(parts.next()?).ok().filter(|h| h.len() == 32)?;
    parts.next().is_none().then_some((iterations, salt, hash))
}

/// Compares without an early exit on the first differing byte.
pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn verify_password(password: &str, stored: &str) -> bool {
    match parse_hash(stored) {
        Some((iterations, salt, hash)) => constant_time_eq(&digest(&salt, password.as_bytes(), iterations), &hash),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user: String,
    pub role: Role,
    pub expires_at: Instant,
}

/// In-memory bearer tokens.
pub struct Sessions {
    ttl: Duration,
    tokens: Mutex<HashMap<String, Session>>,
}

impl Sessions {
    pub fn new(ttl: Duration) -> Self {
        Sessions { ttl, tokens: Mutex::new(HashMap::new()) }
    }

    pub fn issue(&self, user: &str, role: Role) -> String {
        let mut raw = [0u8; 16];
        rand::rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let now = Instant::now();
        let mut tokens = self.tokens.lock().unwrap_or_else(|e| e.into_inner());
        tokens.retain(|_, s| s.expires_at > now);
        tokens.insert(token.clone(), Session { user: user.to_owned(), role, expires_at: now + self.ttl });
        token
    }

    pub fn validate(&self, token: &str) -> Option<Session> {
        let tokens = self.tokens.lock().unwrap_or_else(|e| e.into_inner());
        tokens.get(token).filter(|s| s.expires_at > Instant::now()).cloned()
    }
}

/// Sliding-window count of failed logins per user id.
pub struct LoginLimiter {
    max_failures: usize,
    window: Duration,
    failures: Mutex<HashMap<String, VecDeque<Instant>>>,
}

impl LoginLimiter {
    pub fn new(max_failures: usize, window: Duration) -> Self {
        LoginLimiter { max_failures, window, failures: Mutex::new(HashMap::new()) }
    }

    /// True when `user` has used up its failures in the current window.
    pub fn is_blocked(&self, user: &str) -> bool {
        let now = Instant::now();
        let mut map = self.failures.lock().unwrap_or_else(|e| e.into_inner());
        match map.get_mut(user) {
            Some(q) => {
                while q.front().is_some_and(|&t| now.duration_since(t) >= self.window) {
                    q.pop_front();
                }
                q.len() >= self.max_failures
            }
            None => false,
        }
    }

    pub fn record_failure(&self, user: &str) {
        let now = Instant::now();
        let mut map = self.failures.lock().unwrap_or_else(|e| e.into_inner());
        if map.len() > 10_000 {
            let window = self.window;
            map.retain(|_, q| q.back().is_some_and(|&t| now.duration_since(t) < window));
        }
        map.entry(user.to_owned()).or_default().push_back(now);
    }

    pub fn clear(&self, user: &str) {
        self.failures.lock().unwrap_or_else(|e| e.into_inner()).remove(user);
    }
}

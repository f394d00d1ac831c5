#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::time::Duration;

use serde_json::{json, Value};
use tempfile::TempDir;
use tokio::time::{sleep, Instant};

pub const BIN: &str = env!("CARGO_BIN_EXE_plantpulse");
pub const ADMIN: (&str, &str) = ("admin", "admin-pw");
pub const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/fig7-8.csv");

/// Ports reserved together so they are distinct from each other.
pub fn free_addrs<const N: usize>() -> [SocketAddr; N] {
    let listeners: Vec<TcpListener> = (0..N).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    std::array::from_fn(|i| listeners[i].local_addr().unwrap())
}

fn merge(base: &mut Value, extra: &Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e.clone(),
    }
}

/// A temp directory holding a config file with free ports.
pub struct Sandbox {
    pub dir: TempDir,
    pub config: PathBuf,
    pub broker: SocketAddr,
    pub meter: SocketAddr,
    pub api: SocketAddr,
}

impl Sandbox {
    pub fn new(extra: Value) -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        let [broker, meter, api] = free_addrs::<3>();
        let mut config = json!({
            "log_level": "info",
            "broker": {"bind": broker.to_string()},
            "meter": {"bind": meter.to_string()},
            "ingest": {"data_dir": "data"},
            "api": {
                "bind": api.to_string(),
                "hash_iterations": 1000,
                "users": [
                    {"user": ADMIN.0, "password": ADMIN.1, "role": "admin"},
                    {"user": "viewer", "password": "viewer-pw", "role": "viewer"}
                ]
            }
        });
        merge(&mut config, &extra);
        let path = dir.path().join("plantpulse.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
        Sandbox { dir, config: path, broker, meter, api }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn command(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(BIN);
        cmd.args(args).env_remove("PLANTPULSE_DATA_DIR").env_remove("RUST_LOG");
        cmd
    }

    /// Runs to completion; returns (exit code, stdout, stderr).
    pub fn run_cli(&self, args: &[&str]) -> (i32, String, String) {
        let out = self.command(args).output().unwrap();
        (
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    }

    pub fn seed(&self, extra: &[&str]) -> (i32, String, String) {
        let config = self.config.to_str().unwrap();
        let mut args = vec!["seed", "--config", config];
        args.extend_from_slice(extra);
        self.run_cli(&args)
    }

    /// Starts `plantpulse run` with stderr logged to `<dir>/<log>`.
    pub fn spawn_run(&self, extra: &[&str], log: &str) -> Proc {
        let log_file = std::fs::File::create(self.dir.path().join(log)).unwrap();
        let mut args = vec!["run", "--config", self.config.to_str().unwrap()];
        args.extend_from_slice(extra);
        let child = self.command(&args).stdin(Stdio::null()).stdout(Stdio::null()).stderr(log_file).spawn().unwrap();
        Proc(Some(child))
    }

    pub fn log(&self, name: &str) -> String {
        std::fs::read_to_string(self.dir.path().join(name)).unwrap_or_default()
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.api)
    }
}

/// Child process killed on drop.
pub struct Proc(pub Option<Child>);

impl Proc {
    pub fn pid(&self) -> u32 {
        self.0.as_ref().unwrap().id()
    }

    pub fn sigterm(&self) {
        signal(self.pid(), libc::SIGTERM);
    }

    pub async fn wait_exit(&mut self, within: Duration) -> Option<ExitStatus> {
        let deadline = Instant::now() + within;
        let child = self.0.as_mut().unwrap();
        loop {
            if let Some(status) = child.try_wait().unwrap() {
                return Some(status);
            }
            if Instant::now() >= deadline {
                return None;
            }
            sleep(Duration::from_millis(20)).await;
        }
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        if let Some(mut c) = self.0.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

pub fn signal(pid: u32, sig: libc::c_int) {
    // SAFETY: plain kill(2) on a process this test spawned.
    assert_eq!(unsafe { libc::kill(pid as libc::pid_t, sig) }, 0, "kill {pid}");
}

pub fn http() -> reqwest::Client {
    reqwest::Client::builder().timeout(Duration::from_secs(10)).build().unwrap()
}

/// Polls `/healthz` until it answers 200.
pub async fn wait_healthz(client: &reqwest::Client, api: SocketAddr, within: Duration) -> Option<Value> {
    let deadline = Instant::now() + within;
    while Instant::now() < deadline {
        if let Ok(r) = client.get(format!("http://{api}/healthz")).send().await {
            if r.status() == 200 {
                return r.json().await.ok();
            }
        }
        sleep(Duration::from_millis(50)).await;
    }
    None
}

pub async fn login(client: &reqwest::Client, api: SocketAddr, user: &str, password: &str) -> reqwest::Response {
    client
        .post(format!("http://{api}/api/login"))
        .json(&json!({"user": user, "password": password}))
        .send()
        .await
        .unwrap()
}

pub async fn token(client: &reqwest::Client, api: SocketAddr) -> String {
    let r = login(client, api, ADMIN.0, ADMIN.1).await;
    assert_eq!(r.status(), 200);
    r.json::<Value>().await.unwrap()["token"].as_str().unwrap().to_owned()
}

pub fn read_status(data: &Path) -> Option<Value> {
    serde_json::from_slice(&std::fs::read(data.join("status.json")).ok()?).ok()
}

/// Polls the supervisor's status file until `cond` holds.
pub async fn wait_status(data: &Path, within: Duration, mut cond: impl FnMut(&Value) -> bool) -> Option<Value> {
    let deadline = Instant::now() + within;
    while Instant::now() < deadline {
        if let Some(s) = read_status(data) {
            if cond(&s) {
                return Some(s);
            }
        }
        sleep(Duration::from_millis(50)).await;
    }
    None
}

pub fn all_running(status: &Value, names: &[&str]) -> bool {
    names.iter().all(|n| status["components"][n]["state"] == "running")
}

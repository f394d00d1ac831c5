//! Starts the selected components in dependency order, restarts crashed
//! ones with backoff, and stops everything in reverse order.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use futures::future::select_all;
use log::{error, info, warn};
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::Command;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use crate::components::{start_component, Component, Report, Running};
use crate::config::SystemConfig;
use crate::status::{State, StatusBoard};

pub const READY_LINE: &str = "READY";
pub const HEALTH_PREFIX: &str = "HEALTH ";

#[derive(Debug, Clone)]
pub enum Mode {
    InProcess,
    /// Each component runs as `<exe> run-component <name> --config <file>`.
    Separate { exe: PathBuf, config_path: PathBuf },
}

#[derive(Debug, Clone)]
pub struct SupervisorOptions {
    pub startup_timeout: Duration,
    pub max_restarts: usize,
    pub restart_window: Duration,
    pub backoff_initial: Duration,
    pub backoff_cap: Duration,
    pub stop_timeout: Duration,
}

impl Default for SupervisorOptions {
    fn default() -> Self {
        SupervisorOptions {
            startup_timeout: Duration::from_secs(10),
            max_restarts: 5,
            restart_window: Duration::from_secs(60),
            backoff_initial: Duration::from_millis(500),
            backoff_cap: Duration::from_secs(8),
            stop_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Stopped,
    StartupFailed { component: Component, reason: String },
    CrashLoop { component: Component, reason: String },
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Stopped => 0,
            Outcome::StartupFailed { .. } | Outcome::CrashLoop { .. } => 1,
        }
    }
}

struct Slot {
    component: Component,
    running: Running,
    crashes: VecDeque<Instant>,
}

pub struct Supervisor {
    config: Arc<SystemConfig>,
    mode: Mode,
    opts: SupervisorOptions,
    board: Arc<StatusBoard>,
}

impl Supervisor {
    pub fn new(config: Arc<SystemConfig>, mode: Mode, opts: SupervisorOptions, components: &[Component]) -> std::io::Result<Self> {
        let names: Vec<&str> = components.iter().map(|c| c.as_str()).collect();
        let board = Arc::new(StatusBoard::new(&config.ingest.data_dir, &names)?);
        Ok(Supervisor { config, mode, opts, board })
    }

    pub fn board(&self) -> &Arc<StatusBoard> {
        &self.board
    }

    fn reporter(&self, component: Component) -> Report {
        let board = self.board.clone();
        Arc::new(move |ok, detail| board.component(component.as_str(), |s| {
            s.ok = ok;
            s.detail = detail;
        }))
    }

    async fn launch(&self, component: Component) -> Result<Running, String> {
        let report = self.reporter(component);
        match &self.mode {
            Mode::InProcess => start_component(component, self.config.clone(), report).await,
            Mode::Separate { exe, config_path } => {
                let (running, pid) = spawn_child(component, exe, config_path, report, self.opts.stop_timeout).await?;
                self.board.component(component.as_str(), |s| s.pid = Some(pid));
                Ok(running)
            }
        }
    }

    /// Retries until ready or the startup timeout passes.
    async fn start_ready(&self, component: Component, shutdown: &CancellationToken) -> Result<Running, String> {
        let deadline = Instant::now() + self.opts.startup_timeout;
        let mut delay = Duration::from_millis(200);
        let mut last = String::from("no attempt finished");
        self.board.component(component.as_str(), |s| s.state = State::Starting);
        loop {
            let attempt = tokio::select! {
                _ = shutdown.cancelled() => return Err("shutdown requested".into()),
                r = tokio::time::timeout_at(deadline, self.launch(component)) => r,
            };
            match attempt {
                Ok(Ok(running)) => {
                    self.board.component(component.as_str(), |s| s.state = State::Running);
                    info!("component_ready - {component}");
                    return Ok(running);
                }
                Ok(Err(e)) => {
                    warn!("component_start_failed - {component}: {e}");
                    last = e;
                }
                Err(_) => {}
            }
            if Instant::now() + delay >= deadline {
                return Err(format!("not ready within {:?}: {last}", self.opts.startup_timeout));
            }
            tokio::time::sleep(delay).await;
            delay = (delay * 2).min(Duration::from_secs(2));
        }
    }

    async fn stop_all(&self, slots: Vec<Slot>) {
        for slot in slots.into_iter().rev() {
            let name = slot.component;
            let result = tokio::time::timeout(self.opts.stop_timeout * 2, slot.running.stop()).await;
            match result {
                Ok(Ok(())) => info!("component_stopped - {name}"),
                Ok(Err(e)) => warn!("component_stop_error - {name}: {e}"),
                Err(_) => warn!("component_stop_timeout - {name}"),
            }
            self.board.component(name.as_str(), |s| {
                s.state = State::Stopped;
                s.ok = false;
                s.pid = None;
            });
        }
    }

    /// Runs until `shutdown` fires or a component fails beyond recovery.
    pub async fn run(&self, components: &[Component], shutdown: CancellationToken) -> Outcome {
        let mut slots: Vec<Slot> = Vec::new();
        for &component in components {
            match self.start_ready(component, &shutdown).await {
                Ok(running) => slots.push(Slot { component, running, crashes: VecDeque::new() }),
                Err(reason) => {
                    self.stop_all(slots).await;
                    if shutdown.is_cancelled() {
                        return Outcome::Stopped;
                    }
                    error!("startup_failed - {component}: {reason}");
                    self.board.component(component.as_str(), |s| {
                        s.state = State::Failed;
                        s.detail = reason.clone();
                    });
                    return Outcome::StartupFailed { component, reason };
                }
            }
        }
        info!("system_ready - {}", components.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","));
        loop {
            let exited = if slots.is_empty() {
                shutdown.cancelled().await;
                None
            } else {
                let waits = select_all(slots.iter_mut().map(|s| &mut s.running.join));
                tokio::select! {
                    _ = shutdown.cancelled() => None,
                    (result, idx, _) = waits => Some((idx, result)),
                }
            };
            let Some((idx, result)) = exited else {
                info!("shutdown_requested");
                self.stop_all(slots).await;
                return Outcome::Stopped;
            };
            let mut reason = match result {
                Ok(Ok(())) => "exited unexpectedly".to_owned(),
                Ok(Err(e)) => e,
                Err(e) => format!("task failed: {e}"),
            };
            let component = slots[idx].component;
            loop {
                let now = Instant::now();
                let window = self.opts.restart_window;
                let crashes = &mut slots[idx].crashes;
                crashes.retain(|&t| now.duration_since(t) < window);
                if crashes.len() >= self.opts.max_restarts {
                    error!("crash_loop - {component}: {reason}");
                    self.board.component(component.as_str(), |s| {
                        s.state = State::Failed;
                        s.ok = false;
                        s.detail = reason.clone();
                    });
                    let dead = slots.remove(idx);
                    dead.running.cancel.cancel();
                    self.stop_all(slots).await;
                    return Outcome::CrashLoop { component, reason };
                }
                crashes.push_back(now);
                let attempt = crashes.len() as u32;
                let backoff = (self.opts.backoff_initial * 2u32.saturating_pow(attempt - 1)).min(self.opts.backoff_cap);
                warn!("component_crashed - {component}: {reason}; restart {attempt} in {backoff:?}");
                self.board.component(component.as_str(), |s| {
                    s.state = State::Restarting;
                    s.ok = false;
                    s.restarts += 1;
                    s.pid = None;
                    s.detail = reason.clone();
                });
                tokio::select! {
                    _ = shutdown.cancelled() => break,
                    _ = tokio::time::sleep(backoff) => {}
                }
                match self.start_ready(component, &shutdown).await {
                    Ok(running) => {
                        slots[idx].running = running;
                        break;
                    }
                    Err(e) => reason = e,
                }
            }
            if shutdown.is_cancelled() {
                // The crashed slot holds a finished handle; drop it before stopping the rest.
                slots.remove(idx);
                self.stop_all(slots).await;
                return Outcome::Stopped;
            }
        }
    }
}

fn send_sigterm(pid: u32) {
    // SAFETY: kill(2) with a pid we spawned has no memory-safety preconditions.
    let rc = unsafe { libc::kill(pid as libc::pid_t, libc::SIGTERM) };
    if rc != 0 {
        warn!("sigterm_failed - pid {pid}: {}", std::io::Error::last_os_error());
    }
}

fn handle_child_line(component: Component, line: &str, report: &Report) {
    if let Some(rest) = line.strip_prefix(HEALTH_PREFIX) {
        let (flag, detail) = rest.split_once(' ').unwrap_or((rest, ""));
        report(flag == "1", detail.to_owned());
    } else if !line.is_empty() {
        info!("child_output - {component}: {line}");
    }
}

async fn spawn_child(
    component: Component,
    exe: &PathBuf,
    config_path: &PathBuf,
    report: Report,
    stop_timeout: Duration,
) -> Result<(Running, u32), String> {
    let mut child = Command::new(exe)
        .arg("run-component")
        .arg(component.as_str())
        .arg("--config")
        .arg(config_path)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| format!("spawn {}: {e}", exe.display()))?;
    let pid = child.id().ok_or("child exited immediately")?;
    let mut lines = BufReader::new(child.stdout.take().expect("piped stdout")).lines();
    loop {
        match lines.next_line().await {
            Ok(Some(line)) if line == READY_LINE => break,
            Ok(Some(line)) => handle_child_line(component, &line, &report),
            _ => {
                let status = child.wait().await.map_err(|e| e.to_string())?;
                return Err(format!("child exited before ready ({status})"));
            }
        }
    }
    tokio::spawn({
        let report = report.clone();
        async move {
            while let Ok(Some(line)) = lines.next_line().await {
                handle_child_line(component, &line, &report);
            }
        }
    });
    let cancel = CancellationToken::new();
    let join = tokio::spawn({
        let cancel = cancel.clone();
        async move {
            tokio::select! {
                status = child.wait() => Err(match status {
                    Ok(s) => format!("child {pid} exited ({s})"),
                    Err(e) => format!("child {pid}: {e}"),
                }),
                _ = cancel.cancelled() => {
                    send_sigterm(pid);
                    match tokio::time::timeout(stop_timeout, child.wait()).await {
                        Ok(Ok(s)) if s.success() => Ok(()),
                        Ok(Ok(s)) => Err(format!("child {pid} stopped with {s}")),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(_) => {
                            let _ = child.kill().await;
                            Err(format!("child {pid} ignored SIGTERM; killed"))
                        }
                    }
                }
            }
        }
    });
    info!("child_started - {component} pid={pid}");
    Ok((Running { cancel, join }, pid))
}

/// Fires on Ctrl-C or SIGTERM.
pub fn shutdown_on_signal() -> CancellationToken {
    let token = CancellationToken::new();
    let t = token.clone();
    tokio::spawn(async move {
        let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(s) => s,
            Err(e) => {
                warn!("sigterm_handler_failed - {e}");
                let _ = tokio::signal::ctrl_c().await;
                t.cancel();
                return;
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
        t.cancel();
    });
    token
}

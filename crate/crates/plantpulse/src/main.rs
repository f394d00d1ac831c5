use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use plantpulse::supervisor::{shutdown_on_signal, HEALTH_PREFIX, READY_LINE};
use plantpulse::{
    load_config, parse_selection, seed, start_component, Component, Mode, Report, Supervisor, SupervisorOptions,
    SystemConfig, EXIT_CONFIG, EXIT_FAILURE,
};

#[derive(Parser)]
#[command(name = "plantpulse", version, about = "Plant energy and environment monitoring system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start components under supervision.
    Run(RunArgs),
    /// Initialise the data directory: users and optional fixture samples.
    Seed {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an already initialised data directory.
        #[arg(long)]
        force: bool,
        /// CSV with a `stream,time,field,value` header.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Validate a config file and print the effective settings.
    CheckConfig { file: PathBuf },
    #[command(hide = true)]
    RunComponent {
        component: Component,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Every component (the default).
    #[arg(long, conflicts_with = "only")]
    all: bool,
    /// Comma-separated subset, e.g. `broker,esp32`.
    #[arg(long, value_name = "LIST")]
    only: Option<String>,
    /// Run each component as its own child process.
    #[arg(long)]
    separate_processes: bool,
}

fn init_logging(config: &SystemConfig) {
    let mut builder = env_logger::Builder::new();
    builder.parse_filters(&config.log_level);
    if let Ok(spec) = std::env::var("RUST_LOG") {
        builder.parse_filters(&spec);
    }
    builder.format_timestamp_millis().try_init().ok();
}

fn load_or_exit(path: &Path) -> Result<SystemConfig, ExitCode> {
    load_config(path).map_err(|e| {
        eprintln!("plantpulse: {e}");
        ExitCode::from(EXIT_CONFIG as u8)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::CheckConfig { file } => match load_or_exit(&file) {
            Ok(config) => {
                let body = serde_json::to_string_pretty(&redacted(&config)).expect("config serializes");
                let _ = writeln!(std::io::stdout(), "{} is valid\n{body}", file.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Seed { config, force, fixture } => {
            let config = match load_or_exit(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            init_logging(&config);
            match seed(&config, fixture.as_deref(), force) {
                Ok(report) => {
                    let samples: usize = report.samples.values().sum();
                    println!("seeded {} with {} users and {samples} samples", report.data_dir.display(), report.users);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("plantpulse: seed failed: {e}");
                    ExitCode::from(EXIT_FAILURE as u8)
                }
            }
        }
        Command::Run(args) => {
            let components = match args.only.as_deref().map(parse_selection).transpose() {
                Ok(Some(list)) if list.is_empty() => {
                    eprintln!("plantpulse: --only needs at least one component");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
                Ok(list) => list.unwrap_or_else(|| Component::ALL.to_vec()),
                Err(e) => {
                    eprintln!("plantpulse: {e}");
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            let config = match load_or_exit(&args.config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            init_logging(&config);
            let mode = if args.separate_processes {
                let exe = match std::env::current_exe() {
                    Ok(p) => p,
                    Err(e) => {
                        eprintln!("plantpulse: cannot locate own executable: {e}");
                        return ExitCode::from(EXIT_FAILURE as u8);
                    }
                };
                let config_path = std::path::absolute(&args.config).unwrap_or(args.config);
                Mode::Separate { exe, config_path }
            } else {
                Mode::InProcess
            };
            runtime().block_on(async move {
                let supervisor = match Supervisor::new(Arc::new(config), mode, SupervisorOptions::default(), &components) {
                    Ok(s) => s,
                    Err(e) => {
                        eprintln!("plantpulse: data directory: {e}");
                        return ExitCode::from(EXIT_FAILURE as u8);
                    }
                };
                let outcome = supervisor.run(&components, shutdown_on_signal()).await;
                log::info!("supervisor_exit - {outcome:?}");
                ExitCode::from(outcome.exit_code() as u8)
            })
        }
        Command::RunComponent { component, config } => {
            let config = match load_or_exit(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            init_logging(&config);
            runtime().block_on(run_child(component, config))
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime")
}

/// One component in its own process, speaking the READY/HEALTH line
/// protocol on stdout.
async fn run_child(component: Component, config: SystemConfig) -> ExitCode {
    let report: Report = Arc::new(|ok, detail: String| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{HEALTH_PREFIX}{} {}", u8::from(ok), detail.replace('\n', " "));
        let _ = out.flush();
    });
    let shutdown = shutdown_on_signal();
    let mut running = match start_component(component, Arc::new(config), report).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("plantpulse: {component}: {e}");
            return ExitCode::from(EXIT_FAILURE as u8);
        }
    };
    {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{READY_LINE}");
        let _ = out.flush();
    }
    tokio::select! {
        _ = shutdown.cancelled() => match running.stop().await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("plantpulse: {component}: {e}");
                ExitCode::from(EXIT_FAILURE as u8)
            }
        },
        result = &mut running.join => {
            eprintln!("plantpulse: {component} exited: {result:?}");
            ExitCode::from(EXIT_FAILURE as u8)
        }
    }
}

fn redacted(config: &SystemConfig) -> SystemConfig {
    let mut c = config.clone();
    for u in &mut c.api.users {
        if u.password.is_some() {
            u.password = Some("********".into());
        }
    }
    c
}

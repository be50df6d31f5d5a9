use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gnc_cli::service::{self, LoopOptions, Pacing, ServiceError};
use gnc_cli::{api, load_system, plot, Exit};
use gnc_core::runner::{Command, RunSummary, Runner, RunnerError};

#[derive(Debug, Parser)]
#[command(name = "gnc", version, about = "Run, validate and review simulated AUV missions")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a mission, paced in real time with the operator API, or headless.
    Run(RunArgs),
    /// Load and cross-check a configuration without running it.
    Validate(ConfigArgs),
    /// Render a telemetry log as an SVG review sheet.
    Plot {
        /// Telemetry log to read.
        #[arg(long)]
        log: PathBuf,
        /// SVG file to write.
        #[arg(long, short, default_value = "telemetry.svg")]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Runner config file, or a stock config name (vectored, survey).
    #[arg(long)]
    config: String,
    /// Mission file (.toml or .kml) replacing the configured mission.
    #[arg(long)]
    mission: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run unpaced. The API is served only if --bind is also given.
    #[arg(long)]
    headless: bool,
    /// Simulated seconds to run.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Telemetry log path.
    #[arg(long)]
    log: Option<PathBuf>,
    /// API listen address.
    #[arg(long)]
    bind: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Validation } else { Exit::Success };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let exit = match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Validate(args) => validate(args),
        Cmd::Plot { log, output } => plot_cmd(&log, &output),
    };
    ExitCode::from(exit as u8)
}

fn validate(args: ConfigArgs) -> Exit {
    let system = match load_system(&args.config, args.mission.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return Exit::Validation;
        }
    };
    if let Err(e) = Runner::new(&system) {
        eprintln!("{e}");
        return Exit::Validation;
    }
    let v = &system.vehicle;
    println!(
        "ok: {}: {:?} frame, {} thrusters ({} allocation columns), {} modes, {} states, {} waypoints",
        args.config,
        v.frame,
        v.thrusters.len(),
        v.allocation_columns(),
        v.modes.len(),
        system.fsm.states.len(),
        system.mission.waypoints.len()
    );
    Exit::Success
}

fn plot_cmd(log: &Path, output: &Path) -> Exit {
    let text = match std::fs::read_to_string(log) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", log.display());
            return Exit::Validation;
        }
    };
    match plot::plot_log(&text, output) {
        Ok(n) => {
            println!("plotted {n} records to {}", output.display());
            Exit::Success
        }
        Err(e @ plot::PlotError::Draw(_)) => {
            eprintln!("{e}");
            Exit::Fault
        }
        Err(e) => {
            eprintln!("{}: {e}", log.display());
            Exit::Validation
        }
    }
}

fn run(args: RunArgs) -> Exit {
    let mut system = match load_system(&args.config.config, args.config.mission.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return Exit::Validation;
        }
    };
    if let Some(seed) = args.seed {
        system.runner.seed = seed;
    }
    if args.log.is_some() {
        system.runner.log = args.log.clone();
    }
    let duration = args.duration.or(system.runner.duration);
    if let Some(d) = duration {
        if !(d > 0.0 && d.is_finite()) {
            eprintln!("--duration must be positive");
            return Exit::Validation;
        }
    } else if args.headless {
        eprintln!("headless runs need a duration (--duration or the runner file)");
        return Exit::Validation;
    }
    let runner = match Runner::new(&system) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Exit::Validation;
        }
    };
    let options = LoopOptions {
        pacing: if args.headless { Pacing::Unpaced } else { Pacing::RealTime { speed: 1.0 } },
        duration,
        log: system.runner.log.clone(),
    };
    let bind = match (&args.bind, args.headless) {
        (Some(b), _) => Some(b.clone()),
        (None, false) => Some(system.runner.bind.clone()),
        (None, true) => None,
    };

    let (handle, thread) = service::spawn(runner, options);
    if let Some(addr) = bind {
        if let Err(e) = serve(&addr, handle) {
            eprintln!("api on {addr}: {e}");
            return Exit::Fault;
        }
    } else {
        drop(handle);
    }
    report(thread.join().expect("control loop thread panicked"), system.runner.log.as_deref())
}

fn serve(addr: &str, handle: service::LoopHandle) -> std::io::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("operator API listening on http://{}", listener.local_addr()?);
        let app = api::router(handle.clone());
        let shutdown = async move {
            tokio::select! {
                _ = handle.finished() => {}
                _ = tokio::signal::ctrl_c() => {
                    let _ = handle.send(Command::Stop).await;
                    handle.finished().await;
                }
            }
        };
        axum::serve(listener, app).with_graceful_shutdown(shutdown).await
    })
}

fn report(result: Result<RunSummary, ServiceError>, log: Option<&std::path::Path>) -> Exit {
    match result {
        Ok(s) => {
            let how = if s.stopped { "stopped" } else { "finished" };
            print!("{how} after {} ticks ({:.1} s simulated)", s.ticks, s.time);
            match log {
                Some(p) => println!(", telemetry in {}", p.display()),
                None => println!(),
            }
            Exit::Success
        }
        Err(ServiceError::Runner(RunnerError::Setup(m))) => {
            eprintln!("{m}");
            Exit::Validation
        }
        Err(e) => {
            eprintln!("{e}");
            Exit::Fault
        }
    }
}

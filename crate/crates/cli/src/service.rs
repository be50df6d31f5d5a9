//! The control loop thread and the channels the API talks to it through.
//!
//! The loop owns the [`Runner`]. Requests arrive on a queue and are applied
//! between ticks; each one gets its reply on a oneshot channel. Readers see
//! immutable snapshots published after every tick, so a status never mixes
//! two ticks.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use gnc_core::guidance::Waypoint;
use gnc_core::runner::{
    Command, CommandError, ConfigSummary, RunSummary, Runner, RunnerError, Status, TelemetryRecord, TelemetryWriter,
};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

/// Queue depth for operator requests.
const REQUEST_QUEUE: usize = 64;
/// Records buffered for slow telemetry subscribers before they lag.
const TELEMETRY_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Tick against a monotonic clock, `speed` times faster than real time.
    RealTime { speed: f64 },
    /// Tick as fast as possible.
    Unpaced,
}

#[derive(Debug, Clone)]
pub struct LoopOptions {
    pub pacing: Pacing,
    /// Simulated seconds to run; `None` runs until stopped.
    pub duration: Option<f64>,
    pub log: Option<PathBuf>,
}

pub struct Request {
    pub command: Command,
    pub reply: oneshot::Sender<Result<(), CommandError>>,
}

/// Read side of the loop, cheap to clone into request handlers.
#[derive(Clone)]
pub struct LoopHandle {
    requests: mpsc::Sender<Request>,
    status: watch::Receiver<Status>,
    track: watch::Receiver<Vec<[f64; 3]>>,
    waypoints: watch::Receiver<Vec<Waypoint>>,
    telemetry: broadcast::Sender<TelemetryRecord>,
    config: ConfigSummary,
}

pub fn not_running() -> CommandError {
    CommandError {
        code: "not_running".into(),
        message: "the control loop has finished".into(),
    }
}

impl LoopHandle {
    /// Queues `command` for the next tick boundary and waits for its result.
    pub async fn send(&self, command: Command) -> Result<(), CommandError> {
        let (reply, rx) = oneshot::channel();
        self.requests
            .send(Request { command, reply })
            .await
            .map_err(|_| not_running())?;
        rx.await.map_err(|_| not_running())?
    }

    pub fn status(&self) -> Status {
        self.status.borrow().clone()
    }

    pub fn status_receiver(&self) -> watch::Receiver<Status> {
        self.status.clone()
    }

    pub fn track(&self) -> Vec<[f64; 3]> {
        self.track.borrow().clone()
    }

    pub fn waypoints(&self) -> Vec<Waypoint> {
        self.waypoints.borrow().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<TelemetryRecord> {
        self.telemetry.subscribe()
    }

    pub fn config(&self) -> &ConfigSummary {
        &self.config
    }

    /// Resolves once the loop has stopped ticking.
    pub async fn finished(&self) {
        let mut rx = self.status.clone();
        let _ = rx.wait_for(|s| !s.running).await;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error("telemetry log: {0}")]
    Io(#[from] std::io::Error),
}

struct Publisher {
    status: watch::Sender<Status>,
    track: watch::Sender<Vec<[f64; 3]>>,
    waypoints: watch::Sender<Vec<Waypoint>>,
    telemetry: broadcast::Sender<TelemetryRecord>,
}

impl Publisher {
    fn publish(&self, runner: &Runner, running: bool, record: Option<&TelemetryRecord>) {
        let mut status = runner.status(running);
        if let Some(r) = record {
            status.record = Some(r.clone());
        }
        self.status.send_replace(status);
        self.track.send_replace(runner.track());
        self.waypoints.send_replace(runner.mission().waypoints.clone());
    }
}

/// Starts the loop on its own thread. Requests sent after the run ends are
/// answered with `not_running`.
pub fn spawn(runner: Runner, options: LoopOptions) -> (LoopHandle, JoinHandle<Result<RunSummary, ServiceError>>) {
    let (req_tx, req_rx) = mpsc::channel(REQUEST_QUEUE);
    let (status_tx, status_rx) = watch::channel(runner.status(true));
    let (track_tx, track_rx) = watch::channel(runner.track());
    let (wp_tx, wp_rx) = watch::channel(runner.mission().waypoints.clone());
    let (telemetry_tx, _) = broadcast::channel(TELEMETRY_BUFFER);
    let handle = LoopHandle {
        requests: req_tx,
        status: status_rx,
        track: track_rx,
        waypoints: wp_rx,
        telemetry: telemetry_tx.clone(),
        config: runner.config_summary(),
    };
    let publisher = Publisher {
        status: status_tx,
        track: track_tx,
        waypoints: wp_tx,
        telemetry: telemetry_tx,
    };
    let thread = std::thread::Builder::new()
        .name("gnc-loop".into())
        .spawn(move || run_loop(runner, options, req_rx, publisher))
        .expect("spawn control loop thread");
    (handle, thread)
}

fn open_log(runner: &Runner, path: &Option<PathBuf>) -> std::io::Result<Option<TelemetryWriter<BufWriter<File>>>> {
    path.as_ref()
        .map(|p| TelemetryWriter::new(BufWriter::new(File::create(p)?), &runner.header()))
        .transpose()
}

fn run_loop(
    mut runner: Runner,
    options: LoopOptions,
    mut requests: mpsc::Receiver<Request>,
    publisher: Publisher,
) -> Result<RunSummary, ServiceError> {
    let result = tick_until_done(&mut runner, &options, &mut requests, &publisher);
    if result.is_err() {
        publisher.publish(&runner, false, None);
    }
    result
}

fn tick_until_done(
    runner: &mut Runner,
    options: &LoopOptions,
    requests: &mut mpsc::Receiver<Request>,
    publisher: &Publisher,
) -> Result<RunSummary, ServiceError> {
    let mut log = open_log(runner, &options.log)?;
    let total = options.duration.map(|d| runner.ticks_for(d));
    let period = match options.pacing {
        Pacing::RealTime { speed } => Some(Duration::from_secs_f64(runner.control_dt() / speed)),
        Pacing::Unpaced => None,
    };
    let start = Instant::now();
    loop {
        while let Ok(req) = requests.try_recv() {
            let _ = req.reply.send(runner.apply(req.command));
        }
        let mut record = match runner.tick() {
            Ok(r) => r,
            Err(RunnerError::Fault { time, message, record }) => {
                if let Some(mut w) = log.take() {
                    w.write(&record)?;
                    w.into_inner()?;
                }
                let _ = publisher.telemetry.send((*record).clone());
                return Err(RunnerError::Fault { time, message, record }.into());
            }
            Err(e) => return Err(e.into()),
        };
        let done = total.is_some_and(|t| runner.ticks() >= t) || runner.stop_requested();
        record.flags.final_record = done;
        if let Some(w) = log.as_mut() {
            w.write(&record)?;
        }
        // Telemetry goes out before the status so a subscriber that sees the
        // run end has already been offered the final record.
        let _ = publisher.telemetry.send(record.clone());
        publisher.publish(runner, !done, Some(&record));
        if done {
            if let Some(w) = log.take() {
                w.into_inner()?;
            }
            return Ok(RunSummary {
                ticks: runner.ticks(),
                time: runner.time(),
                stopped: runner.stop_requested(),
            });
        }
        if let Some(period) = period {
            // Deadlines are absolute so sleep jitter does not accumulate.
            let deadline = start + period.mul_f64(runner.ticks() as f64);
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            }
        }
    }
}

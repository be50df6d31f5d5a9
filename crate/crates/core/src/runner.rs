//! Tick loop composing simulator, navigation, guidance and control, plus the
//! telemetry record stream and the operator command set.

use crate::allocation::{Allocator, Thruster};
use crate::config::System;
use crate::control::{ControlError, Controller, Odometry, Setpoint};
use crate::dof::DofId;
use crate::dynamics::{Navigator, SimState, Simulator};
use crate::frames::EarthFrame;
use crate::guidance::{Guidance, GuidanceError, Mission, TransitionCause, Waypoint};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use thiserror::Error;

pub const TELEMETRY_SCHEMA: &str = "gnc-telemetry";
pub const TELEMETRY_VERSION: u32 = 1;
/// Positions kept for the breadcrumb track.
pub const TRACK_LENGTH: usize = 20;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("setup: {0}")]
    Setup(String),
    #[error("simulation fault at t = {time} s: {message}")]
    Fault {
        time: f64,
        message: String,
        record: Box<TelemetryRecord>,
    },
    #[error("telemetry output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ControlError> for RunnerError {
    fn from(e: ControlError) -> Self {
        RunnerError::Setup(e.to_string())
    }
}

impl From<GuidanceError> for RunnerError {
    fn from(e: GuidanceError) -> Self {
        RunnerError::Setup(e.to_string())
    }
}

/// First line of every telemetry log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryHeader {
    pub schema: String,
    pub version: u32,
    pub earth_frame: EarthFrame,
    pub control_rate: f64,
    pub physics_rate: f64,
    pub seed: u64,
    pub thrusters: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateRecord {
    pub position: [f64; 3],
    /// Roll, pitch, yaw in radians.
    pub rpy: [f64; 3],
    pub linear: [f64; 3],
    pub angular: [f64; 3],
    pub depth: f64,
    pub altitude: f64,
}

impl StateRecord {
    fn from_odometry(o: &Odometry) -> Self {
        let (r, p, y) = o.pose.attitude.euler();
        Self {
            position: o.pose.position.into(),
            rpy: [r, p, y],
            linear: o.twist.linear.into(),
            angular: o.twist.angular.into(),
            depth: o.depth,
            altitude: o.altitude,
        }
    }

    fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.rpy)
            .chain(&self.linear)
            .chain(&self.angular)
            .chain([&self.depth, &self.altitude])
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThrusterRecord {
    pub id: String,
    pub force: f64,
    pub command: f64,
    /// Commanded servo angle, articulated thrusters only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    /// True servo angle at the start of the tick.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub servo_angle: Option<f64>,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TelemetryFlags {
    pub saturation: bool,
    pub gimbal: bool,
    pub fault: bool,
    /// Last record of the run.
    #[serde(rename = "final")]
    pub final_record: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub tick: u64,
    pub time: f64,
    pub truth: StateRecord,
    pub odometry: StateRecord,
    pub fsm_state: String,
    pub mode: String,
    pub controller_enabled: bool,
    /// Merged guidance setpoint.
    pub setpoint: BTreeMap<DofId, f64>,
    /// Setpoint tracked by the controller, including held channels.
    pub tracked: BTreeMap<DofId, f64>,
    pub errors: BTreeMap<DofId, f64>,
    pub tau_star: BTreeMap<DofId, f64>,
    pub thrusters: Vec<ThrusterRecord>,
    pub allocation_rows: usize,
    pub residual: f64,
    pub flags: TelemetryFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_waypoint: Option<usize>,
}

impl TelemetryRecord {
    /// True when every numeric field is finite.
    pub fn is_finite(&self) -> bool {
        let maps = [&self.setpoint, &self.tracked, &self.errors, &self.tau_star];
        self.time.is_finite()
            && self.truth.is_finite()
            && self.odometry.is_finite()
            && maps.iter().all(|m| m.values().all(|v| v.is_finite()))
            && self.thrusters.iter().all(|t| {
                t.force.is_finite()
                    && t.command.is_finite()
                    && t.angle.is_none_or(f64::is_finite)
                    && t.servo_angle.is_none_or(f64::is_finite)
            })
            && self.residual.is_finite()
    }
}

/// Writes the header line, then one JSON line per record.
pub struct TelemetryWriter<W: Write> {
    out: W,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(mut out: W, header: &TelemetryHeader) -> std::io::Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &TelemetryRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported telemetry schema '{schema}' version {version}")]
    Schema { schema: String, version: u32 },
}

/// Parses a telemetry log written by [`TelemetryWriter`].
pub fn read_log(text: &str) -> Result<(TelemetryHeader, Vec<TelemetryRecord>), LogError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(LogError::Parse {
        line: 1,
        message: "empty log".into(),
    })?;
    let header: TelemetryHeader = serde_json::from_str(first).map_err(|e| LogError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != TELEMETRY_SCHEMA || header.version != TELEMETRY_VERSION {
        return Err(LogError::Schema {
            schema: header.schema,
            version: header.version,
        });
    }
    let records = lines
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok((header, records))
}

/// Operator requests, applied between ticks.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Replaces the waypoint list, keeping the mission origin.
    SetWaypoints(Vec<Waypoint>),
    Transition(String),
    SetControllerEnabled(bool),
    Teleop(Setpoint),
    SetPayload(bool),
    Stop,
}

/// Rejection with a machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code}: {message}")]
pub struct CommandError {
    pub code: String,
    pub message: String,
}

impl From<GuidanceError> for CommandError {
    fn from(e: GuidanceError) -> Self {
        CommandError {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

/// Read-only summary served to operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub earth_frame: EarthFrame,
    pub control_rate: f64,
    pub physics_rate: f64,
    pub seed: u64,
    pub thrusters: Vec<ThrusterSummary>,
    pub modes: BTreeMap<String, Vec<DofId>>,
    pub states: Vec<StateSummary>,
    pub initial_state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThrusterSummary {
    pub id: String,
    pub articulated: bool,
    pub force_min: f64,
    pub force_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub name: String,
    pub mode: String,
    pub behaviors: Vec<String>,
    pub allowed_transitions: Vec<String>,
}

/// Latest record plus loop-level flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub record: Option<TelemetryRecord>,
    pub running: bool,
    /// Stand-in for the payload power switch; has no effect on the vehicle.
    pub payload_enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub ticks: u64,
    pub time: f64,
    pub stopped: bool,
}

pub struct Runner {
    system: System,
    sim: Simulator,
    nav: Navigator,
    guidance: Guidance,
    controller: Controller,
    tick: u64,
    dt: f64,
    substeps: usize,
    physics_dt: f64,
    track: VecDeque<[f64; 3]>,
    last: Option<TelemetryRecord>,
    payload: bool,
    stop_requested: bool,
}

impl Runner {
    pub fn new(system: &System) -> Result<Self, RunnerError> {
        let rc = &system.runner;
        rc.validate().map_err(RunnerError::Setup)?;
        let v = &system.vehicle;
        let dt = rc.control_dt();
        let guidance = Guidance::new(&system.fsm, system.mission.clone(), v.frame, v.params.seabed_depth)?;
        let controller = Controller::new(
            v.modes.clone(),
            guidance.mode(),
            Allocator::new(v.thrusters.clone()),
            v.frame,
            dt,
        )?;
        let sim = Simulator::new(v.params.clone(), v.frame, v.thrusters.clone(), rc.start.pose());
        Ok(Self {
            system: system.clone(),
            sim,
            nav: Navigator::new(rc.noise, rc.seed),
            guidance,
            controller,
            tick: 0,
            dt,
            substeps: rc.substeps(),
            physics_dt: rc.physics_dt(),
            track: VecDeque::with_capacity(TRACK_LENGTH),
            last: None,
            payload: false,
            stop_requested: false,
        })
    }

    pub fn header(&self) -> TelemetryHeader {
        let rc = &self.system.runner;
        TelemetryHeader {
            schema: TELEMETRY_SCHEMA.into(),
            version: TELEMETRY_VERSION,
            earth_frame: self.system.vehicle.frame,
            control_rate: rc.control_rate,
            physics_rate: rc.physics_rate,
            seed: rc.seed,
            thrusters: self.sim.thrusters().iter().map(|t| t.id().to_string()).collect(),
        }
    }

    pub fn config_summary(&self) -> ConfigSummary {
        let v = &self.system.vehicle;
        ConfigSummary {
            earth_frame: v.frame,
            control_rate: self.system.runner.control_rate,
            physics_rate: self.system.runner.physics_rate,
            seed: self.system.runner.seed,
            thrusters: v
                .thrusters
                .iter()
                .map(|t| ThrusterSummary {
                    id: t.id().to_string(),
                    articulated: t.is_articulated(),
                    force_min: t.spec().force_min,
                    force_max: t.spec().force_max,
                })
                .collect(),
            modes: v.modes.iter().map(|m| (m.name.clone(), m.dofs.iter().collect())).collect(),
            states: self
                .system
                .fsm
                .states
                .iter()
                .map(|s| StateSummary {
                    name: s.name.clone(),
                    mode: s.mode.clone(),
                    behaviors: s.behaviors.iter().map(|b| b.kind.name().to_string()).collect(),
                    allowed_transitions: s.allowed_transitions.clone(),
                })
                .collect(),
            initial_state: self.system.fsm.initial.clone(),
        }
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn control_dt(&self) -> f64 {
        self.dt
    }

    pub fn sim_state(&self) -> &SimState {
        self.sim.state()
    }

    pub fn guidance(&self) -> &Guidance {
        &self.guidance
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn mission(&self) -> &Mission {
        self.guidance.mission()
    }

    /// Most recent positions, oldest first, at most [`TRACK_LENGTH`].
    pub fn track(&self) -> Vec<[f64; 3]> {
        self.track.iter().copied().collect()
    }

    pub fn last_record(&self) -> Option<&TelemetryRecord> {
        self.last.as_ref()
    }

    pub fn status(&self, running: bool) -> Status {
        Status {
            record: self.last.clone(),
            running,
            payload_enabled: self.payload,
        }
    }

    pub fn stop_requested(&self) -> bool {
        self.stop_requested
    }

    fn sync_mode(&mut self) {
        let mode = self.guidance.mode().to_string();
        self.controller
            .set_mode(&mode)
            .expect("FSM modes are validated against the vehicle");
    }

    /// Applies one operator command. Call only between ticks.
    pub fn apply(&mut self, cmd: Command) -> Result<(), CommandError> {
        match cmd {
            Command::SetWaypoints(waypoints) => {
                let mission = Mission {
                    origin: self.guidance.mission().origin,
                    waypoints,
                };
                self.guidance.set_mission(mission)?;
            }
            Command::Transition(target) => {
                if self.guidance.request_transition(&target, TransitionCause::Operator)? {
                    self.sync_mode();
                }
            }
            Command::SetControllerEnabled(on) => self.controller.set_enabled(on),
            Command::Teleop(values) => {
                if values.values().any(|v| !v.is_finite()) {
                    return Err(CommandError {
                        code: "invalid_teleop".into(),
                        message: "teleop values must be finite".into(),
                    });
                }
                self.guidance.set_teleop(&values, self.time());
            }
            Command::SetPayload(on) => self.payload = on,
            Command::Stop => self.stop_requested = true,
        }
        Ok(())
    }

    /// Runs one control period and returns its record.
    pub fn tick(&mut self) -> Result<TelemetryRecord, RunnerError> {
        let time = self.time();
        let truth_state = self.sim.state().clone();
        let params = &self.system.vehicle.params;
        let frame = self.system.vehicle.frame;
        let mut odom = self.nav.measure(&truth_state, params, frame);
        odom.time = time;
        let truth = {
            let depth = frame.depth_of(&truth_state.pose.position);
            Odometry {
                time,
                pose: truth_state.pose,
                twist: truth_state.twist,
                depth,
                altitude: params.seabed_depth - depth,
            }
        };

        let fsm_state = self.guidance.state().to_string();
        let gout = self.guidance.evaluate(&odom);
        let active_waypoint = self.guidance.behaviors().iter().find_map(|b| match &b.behavior {
            crate::guidance::Behavior::PathFollowing(p) => Some(p.active_index()),
            _ => None,
        });
        let cout = self.controller.tick(&odom, &gout.setpoint, self.dt);

        let commands: Vec<f64> = cout.outputs.iter().map(|o| o.command).collect();
        let angles: Vec<Option<f64>> = cout.outputs.iter().map(|o| o.angle).collect();
        self.sim.apply_commands(&commands, &angles);

        let thrusters = cout
            .outputs
            .iter()
            .zip(self.sim.thrusters())
            .enumerate()
            .map(|(k, (o, t))| ThrusterRecord {
                id: o.id.clone(),
                force: o.force,
                command: o.command,
                angle: o.angle,
                servo_angle: matches!(t, Thruster::Articulated(_)).then(|| truth_state.servo_angles[k]),
                saturated: o.saturated,
            })
            .collect();
        let mut record = TelemetryRecord {
            tick: self.tick,
            time,
            truth: StateRecord::from_odometry(&truth),
            odometry: StateRecord::from_odometry(&odom),
            fsm_state,
            mode: self.controller.mode().name.clone(),
            controller_enabled: self.controller.is_enabled(),
            setpoint: gout.setpoint.clone(),
            tracked: cout.setpoint.iter().copied().collect(),
            errors: cout.errors.iter().copied().collect(),
            tau_star: cout.tau_star.iter().copied().collect(),
            thrusters,
            allocation_rows: cout.allocation_rows,
            residual: cout.residual,
            flags: TelemetryFlags {
                saturation: cout.flags.saturation,
                gimbal: cout.flags.gimbal,
                fault: cout.flags.fault,
                final_record: false,
            },
            fault: cout.fault.clone(),
            events: gout.events.iter().map(|e| e.to_string()).collect(),
            active_waypoint,
        };

        for _ in 0..self.substeps {
            if let Err(e) = self.sim.advance(self.physics_dt) {
                let message = e.to_string();
                record.flags.fault = true;
                record.flags.final_record = true;
                record.fault = Some(message.clone());
                self.last = Some(record.clone());
                return Err(RunnerError::Fault {
                    time,
                    message,
                    record: Box::new(record),
                });
            }
        }

        if let Some(target) = gout.requested_transition {
            if let Ok(true) = self.guidance.request_transition(&target, TransitionCause::Event) {
                self.sync_mode();
            }
        }

        if self.track.len() == TRACK_LENGTH {
            self.track.pop_front();
        }
        self.track.push_back(record.odometry.position);
        self.tick += 1;
        self.last = Some(record.clone());
        Ok(record)
    }

    /// Number of ticks covering `duration` seconds.
    pub fn ticks_for(&self, duration: f64) -> u64 {
        ((duration / self.dt) - 1e-9).ceil().max(1.0) as u64
    }

    /// Runs without pacing for `duration` seconds of simulated time,
    /// writing the telemetry stream to `out`. A fault writes its diagnostic
    /// record before returning the error.
    pub fn run_headless<W: Write>(&mut self, duration: f64, out: W) -> Result<RunSummary, RunnerError> {
        let mut writer = TelemetryWriter::new(out, &self.header())?;
        let total = self.ticks_for(duration);
        let summary = loop {
            let mut record = match self.tick() {
                Ok(r) => r,
                Err(RunnerError::Fault { time, message, record }) => {
                    writer.write(&record)?;
                    writer.into_inner()?;
                    return Err(RunnerError::Fault { time, message, record });
                }
                Err(e) => return Err(e),
            };
            let done = self.tick >= total || self.stop_requested;
            if done {
                record.flags.final_record = true;
                self.last = Some(record.clone());
            }
            writer.write(&record)?;
            if done {
                break RunSummary {
                    ticks: self.tick,
                    time: self.time(),
                    stopped: self.stop_requested,
                };
            }
        };
        writer.into_inner()?;
        Ok(summary)
    }
}

//! TOML configuration: runner, vehicle, FSM and mission files.
//!
//! Validation errors carry the file and, where the offending item can be
//! located, its line.

use crate::allocation::{ArticulatedThruster, FixedThruster, ThrustPolynomial, Thruster};
use crate::control::{ControlMode, PidGains};
use crate::dof::DofId;
use crate::dynamics::{NoiseConfig, VehicleParams};
use crate::frames::{rotation_from_euler, EarthFrame, Pose, Transform, Vec3};
use crate::guidance::{import_kml, FsmConfig, GeoOrigin, Mission, StateConfig, Waypoint};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use toml::Spanned;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io { file: String, message: String },
    Parse { file: String, message: String },
    Validation {
        file: String,
        line: Option<usize>,
        field: String,
        message: String,
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { file, message } => write!(f, "{file}: {message}"),
            ConfigError::Parse { file, message } => write!(f, "{file}: parse error: {message}"),
            ConfigError::Validation {
                file,
                line: Some(line),
                field,
                message,
            } => write!(f, "{file}:{line}: {field}: {message}"),
            ConfigError::Validation {
                file, field, message, ..
            } => write!(f, "{file}: {field}: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Validation { line, .. } => *line,
            _ => None,
        }
    }
}

/// Source text of one file, used to turn byte spans into line numbers.
struct Source<'a> {
    file: &'a str,
    text: &'a str,
}

impl Source<'_> {
    fn line_of(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn invalid<T>(&self, span: Option<std::ops::Range<usize>>, field: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
        Err(ConfigError::Validation {
            file: self.file.to_string(),
            line: span.map(|s| self.line_of(s.start)),
            field: field.into(),
            message: message.into(),
        })
    }

    fn parse<T: serde::de::DeserializeOwned>(&self) -> Result<T, ConfigError> {
        toml::from_str(self.text).map_err(|e| ConfigError::Parse {
            file: self.file.to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThrusterKind {
    Fixed,
    Articulated,
}

/// Thruster entry as written in the vehicle file. Angles are in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThrusterConfig {
    pub id: String,
    pub kind: ThrusterKind,
    pub position: [f64; 3],
    /// Mount roll, pitch, yaw.
    #[serde(default)]
    pub rpy_deg: [f64; 3],
    pub force_min: f64,
    pub force_max: f64,
    pub poly: Vec<f64>,
    pub command_min: f64,
    pub command_max: f64,
    #[serde(default)]
    pub servo_rate_deg: Option<f64>,
    #[serde(default)]
    pub angle_min_deg: Option<f64>,
    #[serde(default)]
    pub angle_max_deg: Option<f64>,
    #[serde(default)]
    pub angle_deg: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleFile {
    #[serde(default)]
    earth_frame: EarthFrame,
    params: Spanned<VehicleParams>,
    thrusters: Vec<Spanned<ThrusterConfig>>,
    modes: BTreeMap<String, Spanned<BTreeMap<String, Spanned<PidGains>>>>,
}

#[derive(Debug, Clone)]
pub struct VehicleConfig {
    pub frame: EarthFrame,
    pub params: VehicleParams,
    pub thrusters: Vec<Thruster>,
    pub thruster_configs: Vec<ThrusterConfig>,
    pub modes: Vec<ControlMode>,
}

impl VehicleConfig {
    pub fn mode_names(&self) -> BTreeSet<String> {
        self.modes.iter().map(|m| m.name.clone()).collect()
    }

    pub fn allocation_columns(&self) -> usize {
        self.thrusters.iter().map(|t| if t.is_articulated() { 2 } else { 1 }).sum()
    }
}

fn build_thruster(src: &Source, t: &Spanned<ThrusterConfig>, ids: &mut BTreeSet<String>) -> Result<Thruster, ConfigError> {
    let span = Some(t.span());
    let c = t.get_ref();
    let field = |name: &str| format!("thrusters.{}.{name}", c.id);
    if !ids.insert(c.id.clone()) {
        return src.invalid(span, "thrusters.id", format!("duplicate thruster id '{}'", c.id));
    }
    let finite = c.position.iter().chain(&c.rpy_deg).chain(&c.poly).all(|v| v.is_finite())
        && [c.force_min, c.force_max, c.command_min, c.command_max].iter().all(|v| v.is_finite());
    if !finite {
        return src.invalid(span, field("*"), "values must be finite");
    }
    if !(c.command_min < c.command_max) {
        return src.invalid(span, field("command_min"), "command_min must be below command_max");
    }
    if !(c.force_min < c.force_max) {
        return src.invalid(span, field("force_min"), "force_min must be below force_max");
    }
    if !(c.force_min <= 0.0 && c.force_max >= 0.0) {
        return src.invalid(span, field("force_min"), "force range must contain zero");
    }
    let poly = ThrustPolynomial::new(c.poly.clone());
    if !poly.is_strictly_monotone(c.command_min, c.command_max) {
        return src.invalid(span, field("poly"), "polynomial is not strictly monotone on the command range");
    }
    let (a, b) = (poly.eval(c.command_min), poly.eval(c.command_max));
    let (lo, hi) = (a.min(b), a.max(b));
    let tol = 1e-9 * (1.0 + hi.abs().max(lo.abs()));
    let needed_lo = if c.kind == ThrusterKind::Articulated { 0.0 } else { c.force_min };
    if lo > needed_lo + tol || hi < c.force_max - tol {
        return src.invalid(
            span,
            field("poly"),
            format!("polynomial reaches [{lo}, {hi}] N, which does not cover the force range"),
        );
    }
    let [r, p, y] = c.rpy_deg.map(f64::to_radians);
    let fixed = FixedThruster {
        id: c.id.clone(),
        mount: Transform::new(rotation_from_euler(r, p, y), Vec3::from(c.position)),
        force_min: c.force_min,
        force_max: c.force_max,
        poly,
        command_min: c.command_min,
        command_max: c.command_max,
    };
    match c.kind {
        ThrusterKind::Fixed => {
            if c.servo_rate_deg.is_some() || c.angle_min_deg.is_some() || c.angle_max_deg.is_some() || c.angle_deg.is_some() {
                return src.invalid(span, field("servo_rate_deg"), "servo fields are only valid on articulated thrusters");
            }
            Ok(Thruster::Fixed(fixed))
        }
        ThrusterKind::Articulated => {
            let (Some(rate), Some(lo), Some(hi)) = (c.servo_rate_deg, c.angle_min_deg, c.angle_max_deg) else {
                return src.invalid(
                    span,
                    field("servo_rate_deg"),
                    "articulated thrusters need servo_rate_deg, angle_min_deg and angle_max_deg",
                );
            };
            if !(rate > 0.0 && rate.is_finite()) {
                return src.invalid(span, field("servo_rate_deg"), "must be positive");
            }
            if !(lo < hi && lo > -180.0 && hi < 180.0) {
                return src.invalid(span, field("angle_min_deg"), "need -180 < angle_min_deg < angle_max_deg < 180");
            }
            let angle = c.angle_deg.unwrap_or(0.0_f64.clamp(lo, hi));
            if !(lo..=hi).contains(&angle) {
                return src.invalid(span, field("angle_deg"), "initial angle outside its limits");
            }
            Ok(Thruster::Articulated(ArticulatedThruster {
                thruster: fixed,
                servo_rate: rate.to_radians(),
                angle_min: lo.to_radians(),
                angle_max: hi.to_radians(),
                current_angle: angle.to_radians(),
            }))
        }
    }
}

pub fn parse_vehicle(text: &str, file: &str) -> Result<VehicleConfig, ConfigError> {
    let src = Source { file, text };
    let raw: VehicleFile = src.parse()?;
    if let Err(e) = raw.params.get_ref().validate() {
        return src.invalid(Some(raw.params.span()), "params", e);
    }
    if raw.thrusters.is_empty() {
        return src.invalid(None, "thrusters", "at least one thruster is required");
    }
    let mut ids = BTreeSet::new();
    let thrusters = raw
        .thrusters
        .iter()
        .map(|t| build_thruster(&src, t, &mut ids))
        .collect::<Result<Vec<_>, _>>()?;
    if raw.modes.is_empty() {
        return src.invalid(None, "modes", "at least one control mode is required");
    }
    let mut modes = Vec::new();
    for (name, gains) in &raw.modes {
        let mut map = BTreeMap::new();
        for (dof, g) in gains.get_ref() {
            let id: DofId = match dof.parse() {
                Ok(d) => d,
                Err(e) => return src.invalid(Some(g.span()), format!("modes.{name}.{dof}"), e.to_string()),
            };
            if map.insert(id, *g.get_ref()).is_some() {
                return src.invalid(Some(g.span()), format!("modes.{name}.{dof}"), "channel given twice");
            }
        }
        let mode = ControlMode::new(name.clone(), map);
        if let Err(e) = mode.validate() {
            return src.invalid(Some(gains.span()), format!("modes.{name}"), e.to_string());
        }
        modes.push(mode);
    }
    Ok(VehicleConfig {
        frame: raw.earth_frame,
        params: raw.params.into_inner(),
        thrusters,
        thruster_configs: raw.thrusters.into_iter().map(Spanned::into_inner).collect(),
        modes,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FsmFile {
    initial: String,
    states: Vec<Spanned<StateConfig>>,
}

pub fn parse_fsm(text: &str, file: &str, modes: &BTreeSet<String>) -> Result<FsmConfig, ConfigError> {
    let src = Source { file, text };
    let raw: FsmFile = src.parse()?;
    let spans: Vec<_> = raw.states.iter().map(|s| s.span()).collect();
    let cfg = FsmConfig {
        initial: raw.initial,
        states: raw.states.into_iter().map(Spanned::into_inner).collect(),
    };
    match cfg.check(modes) {
        Ok(()) => Ok(cfg),
        Err((idx, e)) => {
            let field = idx.map_or("initial".to_string(), |i| format!("states.{}", cfg.states[i].name));
            src.invalid(idx.map(|i| spans[i].clone()), field, e.to_string())
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MissionFile {
    #[serde(default)]
    origin: Option<GeoOrigin>,
    #[serde(default)]
    waypoints: Vec<Spanned<Waypoint>>,
}

/// Parses a TOML mission, or a KML LineString when `file` ends in `.kml`.
/// KML missions take their first point as the local origin.
pub fn parse_mission(text: &str, file: &str) -> Result<Mission, ConfigError> {
    let src = Source { file, text };
    if file.to_ascii_lowercase().ends_with(".kml") {
        let waypoints = import_kml(text, 1.0).map_err(|e| ConfigError::Parse {
            file: file.to_string(),
            message: e.to_string(),
        })?;
        let origin = waypoints.first().map(|w| GeoOrigin {
            lat: w.lat.unwrap_or(0.0),
            lon: w.lon.unwrap_or(0.0),
        });
        return Ok(Mission { origin, waypoints });
    }
    let raw: MissionFile = src.parse()?;
    let spans: Vec<_> = raw.waypoints.iter().map(|w| w.span()).collect();
    let mission = Mission {
        origin: raw.origin,
        waypoints: raw.waypoints.into_iter().map(Spanned::into_inner).collect(),
    };
    if let Err(e) = mission.validate() {
        let idx = match &e {
            crate::guidance::GuidanceError::InvalidWaypoint { index, .. } => Some(*index),
            _ => None,
        };
        let field = idx.map_or("waypoints".into(), |i| format!("waypoints[{i}]"));
        return src.invalid(idx.map(|i| spans[i].clone()), field, e.to_string());
    }
    Ok(mission)
}

fn default_control_rate() -> f64 {
    10.0
}
fn default_physics_rate() -> f64 {
    100.0
}
fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    #[serde(default)]
    pub position: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

impl StartPose {
    pub fn pose(&self) -> Pose {
        let [r, p, y] = self.rpy_deg.map(f64::to_radians);
        Pose {
            position: Vec3::from(self.position),
            attitude: rotation_from_euler(r, p, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    pub vehicle: PathBuf,
    pub fsm: PathBuf,
    #[serde(default)]
    pub mission: Option<PathBuf>,
    #[serde(default = "default_control_rate")]
    pub control_rate: f64,
    #[serde(default = "default_physics_rate")]
    pub physics_rate: f64,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub start: StartPose,
}

impl RunnerConfig {
    /// Physics steps per control tick.
    pub fn substeps(&self) -> usize {
        (self.physics_rate / self.control_rate).round() as usize
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn physics_dt(&self) -> f64 {
        self.control_dt() / self.substeps() as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.control_rate > 0.0 && self.physics_rate > 0.0) {
            return Err("rates must be positive".into());
        }
        if self.control_rate > self.physics_rate {
            return Err("control_rate must not exceed physics_rate".into());
        }
        let ratio = self.physics_rate / self.control_rate;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err("physics_rate must be an integer multiple of control_rate".into());
        }
        if self.physics_dt() > 0.1 {
            return Err("physics step must not exceed 0.1 s".into());
        }
        if let Some(d) = self.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err("duration must be positive".into());
            }
        }
        let n = &self.noise;
        if [n.drift_rate, n.attitude_sigma, n.depth_sigma, n.velocity_sigma]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err("noise parameters must be non-negative".into());
        }
        Ok(())
    }
}

/// Everything needed to start a run, with cross-references resolved.
#[derive(Debug, Clone)]
pub struct System {
    pub runner: RunnerConfig,
    pub vehicle: VehicleConfig,
    pub fsm: FsmConfig,
    pub mission: Mission,
}

pub fn parse_runner(text: &str, file: &str) -> Result<RunnerConfig, ConfigError> {
    let src = Source { file, text };
    let cfg: RunnerConfig = src.parse()?;
    if let Err(e) = cfg.validate() {
        return src.invalid(None, "runner", e);
    }
    Ok(cfg)
}

/// Loads a runner file and the files it references, resolving relative
/// paths against the runner file's directory. `read` supplies file text.
pub fn load_with(path: &Path, read: &dyn Fn(&Path) -> std::io::Result<String>) -> Result<System, ConfigError> {
    let fetch = |p: &Path| {
        read(p).map_err(|e| ConfigError::Io {
            file: p.display().to_string(),
            message: e.to_string(),
        })
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let text = fetch(path)?;
    let mut runner = parse_runner(&text, &path.display().to_string())?;
    runner.vehicle = base.join(&runner.vehicle);
    runner.fsm = base.join(&runner.fsm);
    runner.mission = runner.mission.map(|m| base.join(m));
    runner.log = runner.log.map(|l| base.join(l));

    let vehicle = parse_vehicle(&fetch(&runner.vehicle)?, &runner.vehicle.display().to_string())?;
    let fsm = parse_fsm(
        &fetch(&runner.fsm)?,
        &runner.fsm.display().to_string(),
        &vehicle.mode_names(),
    )?;
    let mission = match &runner.mission {
        Some(m) => parse_mission(&fetch(m)?, &m.display().to_string())?,
        None => Mission::default(),
    };
    Ok(System {
        runner,
        vehicle,
        fsm,
        mission,
    })
}

pub fn load(path: &Path) -> Result<System, ConfigError> {
    load_with(path, &|p| std::fs::read_to_string(p))
}

/// Stock configurations shipped with the crate, keyed by relative path.
const STOCK_FILES: &[(&str, &str)] = &[
    ("vectored/runner.toml", include_str!("../../../configs/vectored/runner.toml")),
    ("vectored/vehicle.toml", include_str!("../../../configs/vectored/vehicle.toml")),
    ("vectored/fsm.toml", include_str!("../../../configs/vectored/fsm.toml")),
    ("vectored/mission.toml", include_str!("../../../configs/vectored/mission.toml")),
    ("survey/runner.toml", include_str!("../../../configs/survey/runner.toml")),
    ("survey/vehicle.toml", include_str!("../../../configs/survey/vehicle.toml")),
    ("survey/fsm.toml", include_str!("../../../configs/survey/fsm.toml")),
    ("survey/mission.toml", include_str!("../../../configs/survey/mission.toml")),
];

pub const STOCK_NAMES: &[&str] = &["vectored", "survey"];

pub fn stock_file(path: &str) -> Option<&'static str> {
    STOCK_FILES.iter().find(|(p, _)| *p == path).map(|(_, t)| *t)
}

/// Loads a stock configuration by name ("vectored" or "survey").
pub fn stock(name: &str) -> Result<System, ConfigError> {
    let runner = PathBuf::from(name).join("runner.toml");
    load_with(&runner, &|p| {
        let key = p.to_string_lossy().replace('\\', "/");
        stock_file(&key)
            .map(str::to_string)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("no stock file '{key}'")))
    })
}

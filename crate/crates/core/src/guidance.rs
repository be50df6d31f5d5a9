//! Behavior-based guidance: an FSM whose states bind a control mode to a set
//! of prioritized behaviors, and per-DOF arbitration of their claims.

use crate::control::{Odometry, Setpoint};
use crate::dof::DofId;
use crate::frames::{wrap_angle, EarthFrame};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const DEFAULT_LOOKAHEAD: f64 = 5.0;
pub const DEFAULT_ACCEPTANCE_RADIUS: f64 = 2.0;
pub const DEFAULT_CRUISE_SPEED: f64 = 0.5;
pub const DEFAULT_STALENESS_TIMEOUT: f64 = 1.0;
const EARTH_RADIUS: f64 = 6_371_000.0;

pub const EVENT_MISSION_DONE: &str = "mission_done";
pub const EVENT_SURFACING_COMPLETE: &str = "surfacing_complete";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error("path has no remaining waypoints")]
    EmptyPath,
    #[error("unknown state '{0}'")]
    UnknownState(String),
    #[error("transition from '{from}' to '{to}' is not allowed")]
    TransitionNotAllowed { from: String, to: String },
    #[error("waypoint {index}: {reason}")]
    InvalidWaypoint { index: usize, reason: String },
    #[error("{0}")]
    Config(String),
    #[error("KML: {0}")]
    Kml(String),
}

impl GuidanceError {
    /// Stable machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            GuidanceError::EmptyPath => "empty_path",
            GuidanceError::UnknownState(_) => "unknown_state",
            GuidanceError::TransitionNotAllowed { .. } => "transition_not_allowed",
            GuidanceError::InvalidWaypoint { .. } => "invalid_waypoint",
            GuidanceError::Config(_) => "invalid_config",
            GuidanceError::Kml(_) => "invalid_kml",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointClaim {
    pub values: Setpoint,
    pub priority: i64,
    pub source: String,
}

/// Winner of one DOF in an arbitration round.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub value: f64,
    pub priority: i64,
    pub source: String,
}

/// Per-DOF resolution: the highest-priority claimant of each DOF wins.
/// Ties (which validated configs never produce) go to the smallest source id
/// so the result does not depend on claim order.
pub fn arbitrate_detailed(claims: &[SetpointClaim]) -> BTreeMap<DofId, Resolved> {
    let mut out: BTreeMap<DofId, Resolved> = BTreeMap::new();
    for claim in claims {
        for (&dof, &value) in &claim.values {
            let better = match out.get(&dof) {
                None => true,
                Some(cur) => (claim.priority, std::cmp::Reverse(&claim.source), value.to_bits())
                    > (cur.priority, std::cmp::Reverse(&cur.source), cur.value.to_bits()),
            };
            if better {
                out.insert(
                    dof,
                    Resolved {
                        value,
                        priority: claim.priority,
                        source: claim.source.clone(),
                    },
                );
            }
        }
    }
    out
}

pub fn arbitrate(claims: &[SetpointClaim]) -> Setpoint {
    arbitrate_detailed(claims)
        .into_iter()
        .map(|(dof, r)| (dof, r.value))
        .collect()
}

/// A mission waypoint in local (`x`, `y`) or geographic (`lat`, `lon`)
/// coordinates, with exactly one of `depth` or `altitude`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Waypoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

impl Waypoint {
    pub fn local(x: f64, y: f64, depth: f64) -> Self {
        Self {
            x: Some(x),
            y: Some(y),
            depth: Some(depth),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let local = self.x.is_some() || self.y.is_some();
        let geo = self.lat.is_some() || self.lon.is_some();
        match (local, geo) {
            (true, true) => return Err("give either x/y or lat/lon, not both".into()),
            (false, false) => return Err("missing position".into()),
            (true, false) if self.x.is_none() || self.y.is_none() => {
                return Err("both x and y are required".into())
            }
            (false, true) if self.lat.is_none() || self.lon.is_none() => {
                return Err("both lat and lon are required".into())
            }
            _ => {}
        }
        match (self.depth, self.altitude) {
            (Some(_), Some(_)) => return Err("depth and altitude are mutually exclusive".into()),
            (None, None) => return Err("one of depth or altitude is required".into()),
            _ => {}
        }
        let finite = [self.x, self.y, self.lat, self.lon, self.depth, self.altitude, self.speed]
            .iter()
            .flatten()
            .all(|v| v.is_finite());
        if !finite {
            return Err("values must be finite".into());
        }
        if let Some(s) = self.speed {
            if s <= 0.0 {
                return Err("speed must be positive".into());
            }
        }
        if let Some(lat) = self.lat {
            if lat.abs() > 90.0 {
                return Err("latitude out of range".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mission {
    /// Local tangent-plane origin for geographic waypoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<GeoOrigin>,
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
}

/// Waypoint in local coordinates with depth resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Target {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub speed: Option<f64>,
}

impl Mission {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        for (index, w) in self.waypoints.iter().enumerate() {
            w.validate()
                .map_err(|reason| GuidanceError::InvalidWaypoint { index, reason })?;
            if w.lat.is_some() && self.origin.is_none() {
                return Err(GuidanceError::InvalidWaypoint {
                    index,
                    reason: "geographic waypoint needs a mission origin".into(),
                });
            }
        }
        Ok(())
    }

    /// Converts every waypoint to local coordinates of `frame` using a flat
    /// earth around the origin; altitude becomes `seabed_depth - altitude`.
    pub fn resolve(&self, frame: EarthFrame, seabed_depth: f64) -> Result<Vec<Target>, GuidanceError> {
        self.validate()?;
        Ok(self
            .waypoints
            .iter()
            .map(|w| {
                let (x, y) = match (w.x, w.y, w.lat, w.lon, self.origin) {
                    (Some(x), Some(y), ..) => (x, y),
                    (_, _, Some(lat), Some(lon), Some(o)) => {
                        let north = (lat - o.lat).to_radians() * EARTH_RADIUS;
                        let east = (lon - o.lon).to_radians() * EARTH_RADIUS * o.lat.to_radians().cos();
                        match frame {
                            EarthFrame::Enu => (east, north),
                            EarthFrame::Ned => (north, east),
                        }
                    }
                    _ => unreachable!("validated"),
                };
                let depth = match (w.depth, w.altitude) {
                    (Some(d), _) => d,
                    (None, Some(a)) => seabed_depth - a,
                    _ => unreachable!("validated"),
                };
                Target {
                    x,
                    y,
                    depth,
                    speed: w.speed,
                }
            })
            .collect())
    }
}

/// Reads the coordinates of the first `LineString` in a KML document.
///
/// KML gives `lon,lat[,alt]` tuples; the altitude is height above sea level,
/// so a negative value becomes a depth. Points without one get
/// `default_depth`.
pub fn import_kml(text: &str, default_depth: f64) -> Result<Vec<Waypoint>, GuidanceError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| GuidanceError::Kml(e.to_string()))?;
    let coords = doc
        .descendants()
        .filter(|n| n.has_tag_name("LineString"))
        .flat_map(|n| n.children())
        .find(|n| n.has_tag_name("coordinates"))
        .and_then(|n| n.text())
        .ok_or_else(|| GuidanceError::Kml("no LineString coordinates".into()))?;
    coords
        .split_whitespace()
        .enumerate()
        .map(|(i, tuple)| {
            let parts: Result<Vec<f64>, _> = tuple.split(',').map(str::parse::<f64>).collect();
            let parts = parts.map_err(|e| GuidanceError::Kml(format!("tuple {i}: {e}")))?;
            if !(2..=3).contains(&parts.len()) {
                return Err(GuidanceError::Kml(format!("tuple {i}: expected lon,lat[,alt]")));
            }
            let depth = parts.get(2).map(|alt| (-alt).max(0.0)).unwrap_or(default_depth);
            Ok(Waypoint {
                lat: Some(parts[1]),
                lon: Some(parts[0]),
                depth: Some(depth),
                ..Waypoint::default()
            })
        })
        .collect()
}

fn default_lookahead() -> f64 {
    DEFAULT_LOOKAHEAD
}
fn default_acceptance() -> f64 {
    DEFAULT_ACCEPTANCE_RADIUS
}
fn default_cruise() -> f64 {
    DEFAULT_CRUISE_SPEED
}
fn default_staleness() -> f64 {
    DEFAULT_STALENESS_TIMEOUT
}
fn default_threshold() -> f64 {
    0.3
}

/// Behavior kind and its parameters, as written in the FSM config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorKind {
    PathFollowing {
        #[serde(default = "default_lookahead")]
        lookahead: f64,
        #[serde(default = "default_acceptance")]
        acceptance_radius: f64,
        #[serde(default = "default_cruise")]
        cruise_speed: f64,
    },
    PeriodicSurfacing {
        interval: f64,
        #[serde(default)]
        surface_depth: f64,
        #[serde(default)]
        hold_time: f64,
        /// Depth below which the vehicle counts as surfaced, measured above
        /// `surface_depth`.
        #[serde(default = "default_threshold")]
        surface_threshold: f64,
    },
    Teleoperation {
        #[serde(default = "default_staleness")]
        staleness_timeout: f64,
    },
}

impl BehaviorKind {
    pub fn name(&self) -> &'static str {
        match self {
            BehaviorKind::PathFollowing { .. } => "path_following",
            BehaviorKind::PeriodicSurfacing { .. } => "periodic_surfacing",
            BehaviorKind::Teleoperation { .. } => "teleoperation",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive"))
            }
        };
        match *self {
            BehaviorKind::PathFollowing {
                lookahead,
                acceptance_radius,
                cruise_speed,
            } => {
                positive("lookahead", lookahead)?;
                positive("acceptance_radius", acceptance_radius)?;
                positive("cruise_speed", cruise_speed)
            }
            BehaviorKind::PeriodicSurfacing {
                interval,
                surface_depth,
                hold_time,
                surface_threshold,
            } => {
                positive("interval", interval)?;
                positive("surface_threshold", surface_threshold)?;
                if !(hold_time >= 0.0 && surface_depth.is_finite()) {
                    return Err("hold_time must be non-negative".into());
                }
                Ok(())
            }
            BehaviorKind::Teleoperation { staleness_timeout } => {
                positive("staleness_timeout", staleness_timeout)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorConfig {
    /// Instance id; defaults to `<state>/<kind>`.
    #[serde(default)]
    pub id: Option<String>,
    pub priority: i64,
    #[serde(flatten)]
    pub kind: BehaviorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateConfig {
    pub name: String,
    pub mode: String,
    #[serde(default)]
    pub behaviors: Vec<BehaviorConfig>,
    #[serde(default)]
    pub allowed_transitions: Vec<String>,
    /// Event name to target state.
    #[serde(default)]
    pub events: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsmConfig {
    pub initial: String,
    pub states: Vec<StateConfig>,
}

impl FsmConfig {
    /// Checks every cross-reference. Errors name the offending state.
    pub fn validate(&self, modes: &BTreeSet<String>) -> Result<(), GuidanceError> {
        self.check(modes).map_err(|(_, e)| e)
    }

    /// Like [`FsmConfig::validate`], also returning the index of the state
    /// at fault when there is one.
    pub fn check(&self, modes: &BTreeSet<String>) -> Result<(), (Option<usize>, GuidanceError)> {
        let mut names = BTreeSet::new();
        for (i, s) in self.states.iter().enumerate() {
            if !names.insert(s.name.as_str()) {
                return Err((Some(i), GuidanceError::Config(format!("duplicate state '{}'", s.name))));
            }
        }
        if !names.contains(self.initial.as_str()) {
            return Err((
                None,
                GuidanceError::Config(format!("initial state '{}' is not defined", self.initial)),
            ));
        }
        for (i, s) in self.states.iter().enumerate() {
            Self::check_state(s, &names, modes).map_err(|e| (Some(i), e))?;
        }
        Ok(())
    }

    fn check_state(
        s: &StateConfig,
        names: &BTreeSet<&str>,
        modes: &BTreeSet<String>,
    ) -> Result<(), GuidanceError> {
        let cfg = |s: String| Err(GuidanceError::Config(s));
        if !modes.contains(&s.mode) {
            return cfg(format!("state '{}': unknown control mode '{}'", s.name, s.mode));
        }
        let mut priorities = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for (i, b) in s.behaviors.iter().enumerate() {
            if !priorities.insert(b.priority) {
                return cfg(format!(
                    "state '{}': duplicate priority {} on behavior {}",
                    s.name, b.priority, i
                ));
            }
            if !ids.insert(behavior_id(s, i)) {
                return cfg(format!("state '{}': duplicate behavior id on behavior {i}", s.name));
            }
            b.kind
                .validate()
                .map_err(|e| GuidanceError::Config(format!("state '{}' behavior {i}: {e}", s.name)))?;
        }
        for t in &s.allowed_transitions {
            if !names.contains(t.as_str()) {
                return cfg(format!("state '{}': transition to unknown state '{t}'", s.name));
            }
        }
        for (event, target) in &s.events {
            if event != EVENT_MISSION_DONE && event != EVENT_SURFACING_COMPLETE {
                return cfg(format!("state '{}': unknown event '{event}'", s.name));
            }
            if !s.allowed_transitions.contains(target) && *target != s.name {
                return cfg(format!(
                    "state '{}': event '{event}' targets '{target}', which is not an allowed transition",
                    s.name
                ));
            }
        }
        Ok(())
    }
}

fn behavior_id(state: &StateConfig, index: usize) -> String {
    let b = &state.behaviors[index];
    b.id.clone().unwrap_or_else(|| {
        let same_kind = state.behaviors.iter().filter(|o| o.kind.name() == b.kind.name()).count();
        if same_kind > 1 {
            format!("{}/{}#{index}", state.name, b.kind.name())
        } else {
            format!("{}/{}", state.name, b.kind.name())
        }
    })
}

/// Latest operator setpoints, each stamped with its arrival time.
pub type TeleopInputs = BTreeMap<DofId, (f64, f64)>;

/// Everything a behavior may read during one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BehaviorContext<'a> {
    pub odometry: &'a Odometry,
    pub time: f64,
    pub targets: &'a [Target],
    /// Bumped whenever the waypoint list is replaced.
    pub mission_version: u64,
    pub teleop: &'a TeleopInputs,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BehaviorOutput {
    pub claim: Option<Setpoint>,
    pub events: Vec<&'static str>,
}

/// Line-of-sight path follower.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFollower {
    pub lookahead: f64,
    pub acceptance_radius: f64,
    pub cruise_speed: f64,
    active: usize,
    /// Start point of the active segment (x, y, depth).
    start: Option<(f64, f64, f64)>,
    version: Option<u64>,
    done: bool,
}

/// Geometry of the vehicle relative to a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackGeometry {
    pub bearing: f64,
    /// Signed distance off the segment line, positive in the frame's
    /// positive rotation sense from the segment direction.
    pub cross_track: f64,
    pub along_track: f64,
    pub length: f64,
}

pub fn track_geometry(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> TrackGeometry {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let length = dx.hypot(dy);
    let (ux, uy) = if length > 0.0 { (dx / length, dy / length) } else { (1.0, 0.0) };
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    TrackGeometry {
        bearing: uy.atan2(ux),
        cross_track: ux * py - uy * px,
        along_track: ux * px + uy * py,
        length,
    }
}

fn point_segment_distance(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let g = track_geometry(a, b, p);
    let s = g.along_track.clamp(0.0, g.length);
    let t = if g.length > 0.0 { s / g.length } else { 0.0 };
    let q = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
    (p.0 - q.0).hypot(p.1 - q.1)
}

impl PathFollower {
    pub fn new(lookahead: f64, acceptance_radius: f64, cruise_speed: f64) -> Self {
        Self {
            lookahead,
            acceptance_radius,
            cruise_speed,
            active: 0,
            start: None,
            version: None,
            done: false,
        }
    }

    /// Index of the waypoint currently being approached.
    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Picks the segment closest to `pos`; a tie with the approach leg to
    /// the first waypoint goes to the approach leg.
    fn restart(&mut self, targets: &[Target], odom: &Odometry) {
        let pos = (odom.pose.position.x, odom.pose.position.y);
        let first = targets.first().map(|t| (t.x - pos.0).hypot(t.y - pos.1));
        let mut best = (first.unwrap_or(f64::INFINITY), 0);
        for i in 1..targets.len() {
            let a = &targets[i - 1];
            let b = &targets[i];
            let d = point_segment_distance((a.x, a.y), (b.x, b.y), pos);
            if d < best.0 {
                best = (d, i);
            }
        }
        self.active = best.1;
        self.start = if best.1 == 0 {
            Some((pos.0, pos.1, odom.depth))
        } else {
            let a = &targets[best.1 - 1];
            Some((a.x, a.y, a.depth))
        };
        self.done = false;
    }

    pub fn evaluate(&mut self, ctx: &BehaviorContext) -> Result<BehaviorOutput, GuidanceError> {
        let odom = ctx.odometry;
        if self.version != Some(ctx.mission_version) {
            self.version = Some(ctx.mission_version);
            self.restart(ctx.targets, odom);
        }
        if self.done {
            return Ok(BehaviorOutput::default());
        }
        if ctx.targets.is_empty() {
            return Err(GuidanceError::EmptyPath);
        }
        let pos = (odom.pose.position.x, odom.pose.position.y);
        while self.active < ctx.targets.len() {
            let t = &ctx.targets[self.active];
            if (t.x - pos.0).hypot(t.y - pos.1) > self.acceptance_radius {
                break;
            }
            self.start = Some((t.x, t.y, t.depth));
            self.active += 1;
        }
        if self.active >= ctx.targets.len() {
            self.done = true;
            return Ok(BehaviorOutput {
                claim: None,
                events: vec![EVENT_MISSION_DONE],
            });
        }

        let target = &ctx.targets[self.active];
        let (sx, sy, sd) = self.start.unwrap_or((pos.0, pos.1, odom.depth));
        let g = track_geometry((sx, sy), (target.x, target.y), pos);
        let yaw = wrap_angle(g.bearing + (-g.cross_track).atan2(self.lookahead));
        let frac = if g.length > 0.0 {
            (g.along_track / g.length).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let depth = sd + (target.depth - sd) * frac;
        let surge = target.speed.unwrap_or(self.cruise_speed);
        let claim = [(DofId::Yaw, yaw), (DofId::Depth, depth), (DofId::Surge, surge)]
            .into_iter()
            .collect();
        Ok(BehaviorOutput {
            claim: Some(claim),
            events: vec![],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SurfacingPhase {
    Dormant { since: f64 },
    Ascending,
    Holding { since: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSurfacing {
    pub interval: f64,
    pub surface_depth: f64,
    pub hold_time: f64,
    pub surface_threshold: f64,
    phase: Option<SurfacingPhase>,
}

impl PeriodicSurfacing {
    pub fn new(interval: f64, surface_depth: f64, hold_time: f64, surface_threshold: f64) -> Self {
        Self {
            interval,
            surface_depth,
            hold_time,
            surface_threshold,
            phase: None,
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.phase, None | Some(SurfacingPhase::Dormant { .. }))
    }

    /// The interval timer starts at the first evaluation.
    pub fn evaluate(&mut self, depth: f64, t: f64) -> BehaviorOutput {
        let phase = *self.phase.get_or_insert(SurfacingPhase::Dormant { since: t });
        let surfaced = depth < self.surface_depth + self.surface_threshold;
        let next = match phase {
            SurfacingPhase::Dormant { since } if t - since >= self.interval => {
                if surfaced {
                    SurfacingPhase::Holding { since: t }
                } else {
                    SurfacingPhase::Ascending
                }
            }
            SurfacingPhase::Ascending if surfaced => SurfacingPhase::Holding { since: t },
            SurfacingPhase::Holding { .. } if !surfaced => SurfacingPhase::Ascending,
            p => p,
        };
        if let SurfacingPhase::Holding { since } = next {
            if t - since >= self.hold_time {
                self.phase = Some(SurfacingPhase::Dormant { since: t });
                return BehaviorOutput {
                    claim: None,
                    events: vec![EVENT_SURFACING_COMPLETE],
                };
            }
        }
        self.phase = Some(next);
        match next {
            SurfacingPhase::Dormant { .. } => BehaviorOutput::default(),
            _ => BehaviorOutput {
                claim: Some([(DofId::Depth, self.surface_depth)].into_iter().collect()),
                events: vec![],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teleoperation {
    pub staleness_timeout: f64,
}

impl Teleoperation {
    /// Passes through every operator input younger than the timeout.
    pub fn evaluate(&self, inputs: &TeleopInputs, t: f64) -> BehaviorOutput {
        let claim: Setpoint = inputs
            .iter()
            .filter(|(_, (_, stamp))| t - stamp <= self.staleness_timeout)
            .map(|(dof, (v, _))| (*dof, *v))
            .collect();
        BehaviorOutput {
            claim: (!claim.is_empty()).then_some(claim),
            events: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    PathFollowing(PathFollower),
    PeriodicSurfacing(PeriodicSurfacing),
    Teleoperation(Teleoperation),
}

impl Behavior {
    pub fn from_kind(kind: &BehaviorKind) -> Self {
        match *kind {
            BehaviorKind::PathFollowing {
                lookahead,
                acceptance_radius,
                cruise_speed,
            } => Behavior::PathFollowing(PathFollower::new(lookahead, acceptance_radius, cruise_speed)),
            BehaviorKind::PeriodicSurfacing {
                interval,
                surface_depth,
                hold_time,
                surface_threshold,
            } => Behavior::PeriodicSurfacing(PeriodicSurfacing::new(
                interval,
                surface_depth,
                hold_time,
                surface_threshold,
            )),
            BehaviorKind::Teleoperation { staleness_timeout } => {
                Behavior::Teleoperation(Teleoperation { staleness_timeout })
            }
        }
    }

    pub fn evaluate(&mut self, ctx: &BehaviorContext) -> Result<BehaviorOutput, GuidanceError> {
        match self {
            Behavior::PathFollowing(b) => b.evaluate(ctx),
            Behavior::PeriodicSurfacing(b) => Ok(b.evaluate(ctx.odometry.depth, ctx.time)),
            Behavior::Teleoperation(b) => Ok(b.evaluate(ctx.teleop, ctx.time)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BehaviorInstance {
    pub id: String,
    pub priority: i64,
    pub behavior: Behavior,
}

#[derive(Debug, Clone)]
struct StateRuntime {
    config: StateConfig,
    behaviors: Vec<BehaviorInstance>,
}

/// Origin of a transition request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionCause {
    Operator,
    Event,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuidanceOutput {
    pub claims: Vec<SetpointClaim>,
    pub setpoint: Setpoint,
    pub events: Vec<&'static str>,
    /// Target requested by an event mapping of the active state.
    pub requested_transition: Option<String>,
    /// Non-fatal behavior errors, as `(source, message)`.
    pub notes: Vec<(String, String)>,
}

/// The FSM with its behaviors, the mission and the operator inputs.
#[derive(Debug, Clone)]
pub struct Guidance {
    states: Vec<StateRuntime>,
    current: usize,
    frame: EarthFrame,
    seabed_depth: f64,
    mission: Mission,
    targets: Vec<Target>,
    mission_version: u64,
    teleop: TeleopInputs,
}

impl Guidance {
    /// Builds from an FSM config already validated against the mode names.
    pub fn new(
        config: &FsmConfig,
        mission: Mission,
        frame: EarthFrame,
        seabed_depth: f64,
    ) -> Result<Self, GuidanceError> {
        let targets = mission.resolve(frame, seabed_depth)?;
        let states: Vec<StateRuntime> = config
            .states
            .iter()
            .map(|s| StateRuntime {
                config: s.clone(),
                behaviors: s
                    .behaviors
                    .iter()
                    .enumerate()
                    .map(|(i, b)| BehaviorInstance {
                        id: behavior_id(s, i),
                        priority: b.priority,
                        behavior: Behavior::from_kind(&b.kind),
                    })
                    .collect(),
            })
            .collect();
        let current = states
            .iter()
            .position(|s| s.config.name == config.initial)
            .ok_or_else(|| GuidanceError::UnknownState(config.initial.clone()))?;
        Ok(Self {
            states,
            current,
            frame,
            seabed_depth,
            mission,
            targets,
            mission_version: 0,
            teleop: TeleopInputs::new(),
        })
    }

    pub fn state(&self) -> &str {
        &self.states[self.current].config.name
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.states.iter().map(|s| s.config.name.as_str())
    }

    pub fn mode(&self) -> &str {
        &self.states[self.current].config.mode
    }

    pub fn behaviors(&self) -> &[BehaviorInstance] {
        &self.states[self.current].behaviors
    }

    pub fn mission(&self) -> &Mission {
        &self.mission
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn teleop(&self) -> &TeleopInputs {
        &self.teleop
    }

    /// Switches state. Returns whether the state changed; re-entering the
    /// current state is a successful no-op.
    pub fn request_transition(&mut self, target: &str, _cause: TransitionCause) -> Result<bool, GuidanceError> {
        let idx = self
            .states
            .iter()
            .position(|s| s.config.name == target)
            .ok_or_else(|| GuidanceError::UnknownState(target.to_string()))?;
        if idx == self.current {
            return Ok(false);
        }
        let from = &self.states[self.current].config;
        if !from.allowed_transitions.iter().any(|t| t == target) {
            return Err(GuidanceError::TransitionNotAllowed {
                from: from.name.clone(),
                to: target.to_string(),
            });
        }
        self.current = idx;
        Ok(true)
    }

    /// Replaces the waypoint list. Path followers restart at the segment
    /// nearest the vehicle on their next evaluation.
    pub fn set_mission(&mut self, mission: Mission) -> Result<(), GuidanceError> {
        let targets = mission.resolve(self.frame, self.seabed_depth)?;
        self.mission = mission;
        self.targets = targets;
        self.mission_version += 1;
        Ok(())
    }

    /// Stores operator setpoints. They are claimed only by a teleoperation
    /// behavior in the active state.
    pub fn set_teleop(&mut self, values: &Setpoint, time: f64) {
        for (dof, v) in values {
            self.teleop.insert(*dof, (*v, time));
        }
    }

    pub fn evaluate(&mut self, odometry: &Odometry) -> GuidanceOutput {
        let ctx = BehaviorContext {
            odometry,
            time: odometry.time,
            targets: &self.targets,
            mission_version: self.mission_version,
            teleop: &self.teleop,
        };
        let state = &mut self.states[self.current];
        let mut out = GuidanceOutput::default();
        for inst in &mut state.behaviors {
            match inst.behavior.evaluate(&ctx) {
                Ok(o) => {
                    if let Some(values) = o.claim {
                        out.claims.push(SetpointClaim {
                            values,
                            priority: inst.priority,
                            source: inst.id.clone(),
                        });
                    }
                    out.events.extend(o.events);
                }
                Err(e) => out.notes.push((inst.id.clone(), e.to_string())),
            }
        }
        out.setpoint = arbitrate(&out.claims);
        out.requested_transition = out
            .events
            .iter()
            .find_map(|e| state.config.events.get(*e).cloned());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{rotation_from_euler, Pose, Vec3};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn claim(pairs: &[(DofId, f64)], priority: i64, source: &str) -> SetpointClaim {
        SetpointClaim {
            values: pairs.iter().copied().collect(),
            priority,
            source: source.into(),
        }
    }

    fn odom_at(x: f64, y: f64, depth: f64, t: f64) -> Odometry {
        Odometry {
            time: t,
            pose: Pose {
                position: Vec3::new(x, y, -depth),
                attitude: rotation_from_euler(0.0, 0.0, 0.0),
            },
            depth,
            ..Odometry::default()
        }
    }

    #[test]
    fn higher_priority_wins_per_dof() {
        let merged = arbitrate(&[
            claim(&[(DofId::Depth, 5.0)], 1, "a"),
            claim(&[(DofId::Depth, 2.0), (DofId::Yaw, FRAC_PI_2)], 2, "b"),
        ]);
        assert_eq!(merged, [(DofId::Depth, 2.0), (DofId::Yaw, FRAC_PI_2)].into_iter().collect());
    }

    #[test]
    fn single_and_disjoint_claims() {
        let a = claim(&[(DofId::Surge, 0.4), (DofId::Depth, 3.0)], 7, "a");
        assert_eq!(arbitrate(std::slice::from_ref(&a)), a.values);
        let merged = arbitrate(&[claim(&[(DofId::Surge, 1.0)], 9, "a"), claim(&[(DofId::Depth, 2.0)], 1, "b")]);
        assert_eq!(merged.len(), 2);
        assert!(arbitrate(&[]).is_empty());
    }

    fn dof_strategy() -> impl Strategy<Value = DofId> {
        (0usize..12).prop_map(|r| DofId::from_row(r).unwrap())
    }

    fn claims_strategy() -> impl Strategy<Value = Vec<SetpointClaim>> {
        prop::collection::vec(
            (
                prop::collection::btree_map(dof_strategy(), -10.0f64..10.0, 1..5),
                -3i64..4,
                0u8..6,
            ),
            0..8,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(values, priority, s)| SetpointClaim {
                    values,
                    priority,
                    source: format!("b{s}"),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn winner_has_max_priority(claims in claims_strategy()) {
            let merged = arbitrate_detailed(&claims);
            let claimed: BTreeSet<DofId> = claims.iter().flat_map(|c| c.values.keys().copied()).collect();
            prop_assert_eq!(merged.keys().copied().collect::<BTreeSet<_>>(), claimed);
            for (dof, r) in &merged {
                let max = claims.iter().filter(|c| c.values.contains_key(dof)).map(|c| c.priority).max().unwrap();
                prop_assert_eq!(r.priority, max);
                prop_assert!(claims.iter().any(|c| c.source == r.source && c.priority == r.priority && c.values.get(dof) == Some(&r.value)));
            }
        }

        #[test]
        fn permutation_invariant(claims in claims_strategy(), seed in any::<u64>()) {
            let mut shuffled = claims.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(arbitrate(&claims), arbitrate(&shuffled));
        }
    }

    fn follower_ctx<'a>(odom: &'a Odometry, targets: &'a [Target], teleop: &'a TeleopInputs) -> BehaviorContext<'a> {
        BehaviorContext {
            odometry: odom,
            time: odom.time,
            targets,
            mission_version: 0,
            teleop,
        }
    }

    #[test]
    fn on_track_points_at_waypoint() {
        let targets = Mission {
            origin: None,
            waypoints: vec![Waypoint::local(100.0, 0.0, 5.0)],
        }
        .resolve(EarthFrame::Enu, 50.0)
        .unwrap();
        let tele = TeleopInputs::new();
        let odom = odom_at(0.0, 0.0, 5.0, 0.0);
        let mut pf = PathFollower::new(5.0, 2.0, 0.5);
        let c = pf.evaluate(&follower_ctx(&odom, &targets, &tele)).unwrap().claim.unwrap();
        assert_relative_eq!(c[&DofId::Yaw], 0.0);
        assert_relative_eq!(c[&DofId::Depth], 5.0);
        assert_relative_eq!(c[&DofId::Surge], 0.5);
    }

    #[test]
    fn left_of_track_steers_right() {
        let targets = vec![
            Target { x: 0.0, y: 0.0, depth: 2.0, speed: None },
            Target { x: 100.0, y: 0.0, depth: 2.0, speed: Some(1.0) },
        ];
        let tele = TeleopInputs::new();
        let mut pf = PathFollower::new(5.0, 2.0, 0.5);
        // accept the first waypoint, then run the second leg from 10 m left
        let at_start = odom_at(0.0, 0.0, 2.0, 0.0);
        pf.evaluate(&follower_ctx(&at_start, &targets, &tele)).unwrap();
        assert_eq!(pf.active_index(), 1);
        let left = odom_at(20.0, 10.0, 2.0, 1.0);
        let c = pf.evaluate(&follower_ctx(&left, &targets, &tele)).unwrap().claim.unwrap();
        assert!(c[&DofId::Yaw] < 0.0);
        assert_relative_eq!(c[&DofId::Yaw], (-10.0f64).atan2(5.0));
        assert_relative_eq!(c[&DofId::Surge], 1.0);
        let right = odom_at(20.0, -10.0, 2.0, 1.0);
        let c = pf.evaluate(&follower_ctx(&right, &targets, &tele)).unwrap().claim.unwrap();
        assert!(c[&DofId::Yaw] > 0.0);
    }

    #[test]
    fn depth_interpolates_and_acceptance_is_monotone() {
        let targets = vec![
            Target { x: 10.0, y: 0.0, depth: 2.0, speed: None },
            Target { x: 30.0, y: 0.0, depth: 6.0, speed: None },
        ];
        let tele = TeleopInputs::new();
        let mut pf = PathFollower::new(5.0, 2.0, 0.5);
        let mut last = 0;
        let mut done = false;
        for k in 0..=40 {
            let o = odom_at(k as f64, 0.0, 2.0, k as f64);
            let out = pf.evaluate(&follower_ctx(&o, &targets, &tele)).unwrap();
            assert!(pf.active_index() >= last);
            last = pf.active_index();
            if k == 20 {
                assert_relative_eq!(out.claim.as_ref().unwrap()[&DofId::Depth], 4.0);
            }
            if out.events.contains(&EVENT_MISSION_DONE) {
                assert!(!done);
                done = true;
                assert_eq!(k, 28);
            }
        }
        assert!(done && pf.is_done());
        // complete: claims nothing
        let o = odom_at(0.0, 0.0, 2.0, 50.0);
        assert_eq!(pf.evaluate(&follower_ctx(&o, &targets, &tele)).unwrap(), BehaviorOutput::default());
    }

    #[test]
    fn empty_path_is_an_error() {
        let tele = TeleopInputs::new();
        let o = odom_at(0.0, 0.0, 0.0, 0.0);
        let mut pf = PathFollower::new(5.0, 2.0, 0.5);
        assert_eq!(pf.evaluate(&follower_ctx(&o, &[], &tele)), Err(GuidanceError::EmptyPath));
    }

    #[test]
    fn restart_picks_nearest_segment() {
        let targets = vec![
            Target { x: 0.0, y: 0.0, depth: 1.0, speed: None },
            Target { x: 50.0, y: 0.0, depth: 1.0, speed: None },
            Target { x: 50.0, y: 50.0, depth: 1.0, speed: None },
        ];
        let tele = TeleopInputs::new();
        let mut pf = PathFollower::new(5.0, 2.0, 0.5);
        let o = odom_at(48.0, 20.0, 1.0, 0.0);
        let mut ctx = follower_ctx(&o, &targets, &tele);
        ctx.mission_version = 3;
        let c = pf.evaluate(&ctx).unwrap().claim.unwrap();
        assert_eq!(pf.active_index(), 2);
        assert!((c[&DofId::Yaw] - FRAC_PI_2).abs() < 0.5);
    }

    #[test]
    fn surfacing_schedule() {
        let mut s = PeriodicSurfacing::new(600.0, 0.0, 10.0, 0.3);
        assert_eq!(s.evaluate(5.0, 0.0).claim, None);
        assert_eq!(s.evaluate(5.0, 300.0).claim, None);
        let c = s.evaluate(5.0, 601.0).claim.unwrap();
        assert_eq!(c[&DofId::Depth], 0.0);
        assert!(s.evaluate(0.1, 620.0).claim.is_some());
        let out = s.evaluate(0.1, 630.0);
        assert_eq!(out.events, vec![EVENT_SURFACING_COMPLETE]);
        assert!(!s.is_active());
        assert_eq!(s.evaluate(5.0, 1200.0).claim, None);
        assert!(s.evaluate(5.0, 1230.0).claim.is_some());
    }

    #[test]
    fn teleop_claims_fresh_inputs() {
        let t = Teleoperation { staleness_timeout: 1.0 };
        let mut inputs = TeleopInputs::new();
        inputs.insert(DofId::Depth, (2.0, 10.0));
        inputs.insert(DofId::Pitch, (30f64.to_radians(), 10.0));
        let c = t.evaluate(&inputs, 10.5).claim.unwrap();
        assert_eq!(c[&DofId::Depth], 2.0);
        assert_relative_eq!(c[&DofId::Pitch], std::f64::consts::FRAC_PI_6, epsilon = 1e-12);
        assert_eq!(t.evaluate(&inputs, 11.5).claim, None);
    }

    fn fsm() -> FsmConfig {
        toml::from_str(
            r#"
            initial = "survey"
            [[states]]
            name = "survey"
            mode = "five_dof"
            allowed_transitions = ["surfacing", "teleop"]
            events = { mission_done = "surfacing" }
            behaviors = [
                { kind = "path_following", priority = 1 },
                { kind = "periodic_surfacing", priority = 2, interval = 600.0 },
            ]
            [[states]]
            name = "surfacing"
            mode = "depth_only"
            allowed_transitions = ["survey", "teleop"]
            behaviors = [{ kind = "periodic_surfacing", priority = 1, interval = 1.0 }]
            [[states]]
            name = "teleop"
            mode = "five_dof"
            allowed_transitions = ["survey"]
            behaviors = [{ kind = "teleoperation", priority = 5 }]
            "#,
        )
        .unwrap()
    }

    fn modes() -> BTreeSet<String> {
        ["five_dof", "depth_only"].into_iter().map(String::from).collect()
    }

    #[test]
    fn fsm_validation() {
        let cfg = fsm();
        cfg.validate(&modes()).unwrap();
        let mut dup = cfg.clone();
        dup.states[0].behaviors[1].priority = 1;
        let err = dup.validate(&modes()).unwrap_err().to_string();
        assert!(err.contains("duplicate priority"), "{err}");
        let mut bad_mode = cfg.clone();
        bad_mode.states[1].mode = "nope".into();
        assert!(bad_mode.validate(&modes()).is_err());
        let mut bad_target = cfg.clone();
        bad_target.states[2].allowed_transitions.push("dock".into());
        assert!(bad_target.validate(&modes()).is_err());
        let mut bad_event = cfg;
        bad_event.states[2].events.insert("mission_done".into(), "surfacing".into());
        assert!(bad_event.validate(&modes()).is_err());
    }

    #[test]
    fn transitions() {
        let mut g = Guidance::new(&fsm(), Mission::default(), EarthFrame::Enu, 50.0).unwrap();
        assert_eq!(g.state(), "survey");
        assert_eq!(g.request_transition("survey", TransitionCause::Operator), Ok(false));
        assert_eq!(g.request_transition("surfacing", TransitionCause::Operator), Ok(true));
        assert_eq!(g.mode(), "depth_only");
        assert_eq!(g.behaviors().len(), 1);
        g.request_transition("teleop", TransitionCause::Operator).unwrap();
        assert_eq!(
            g.request_transition("dock", TransitionCause::Operator),
            Err(GuidanceError::UnknownState("dock".into()))
        );
        assert!(matches!(
            g.request_transition("surfacing", TransitionCause::Operator),
            Err(GuidanceError::TransitionNotAllowed { .. })
        ));
        assert_eq!(g.state(), "teleop");
    }

    #[test]
    fn teleop_stored_but_ignored_without_behavior() {
        let mut g = Guidance::new(&fsm(), Mission::default(), EarthFrame::Enu, 50.0).unwrap();
        g.set_teleop(&[(DofId::Depth, 3.0)].into_iter().collect(), 0.0);
        let out = g.evaluate(&odom_at(0.0, 0.0, 1.0, 0.1));
        assert!(!out.setpoint.contains_key(&DofId::Depth));
        assert_eq!(g.teleop().len(), 1);
        g.request_transition("teleop", TransitionCause::Operator).unwrap();
        let out = g.evaluate(&odom_at(0.0, 0.0, 1.0, 0.2));
        assert_eq!(out.setpoint[&DofId::Depth], 3.0);
    }

    #[test]
    fn mission_done_requests_mapped_transition() {
        let mission = Mission {
            origin: None,
            waypoints: vec![Waypoint::local(1.0, 0.0, 1.0)],
        };
        let mut g = Guidance::new(&fsm(), mission, EarthFrame::Enu, 50.0).unwrap();
        let out = g.evaluate(&odom_at(0.0, 0.0, 1.0, 0.0));
        assert_eq!(out.events, vec![EVENT_MISSION_DONE]);
        assert_eq!(out.requested_transition.as_deref(), Some("surfacing"));
    }

    #[test]
    fn waypoint_validation() {
        assert!(Waypoint::local(0.0, 0.0, 1.0).validate().is_ok());
        let both = Waypoint {
            altitude: Some(1.0),
            ..Waypoint::local(0.0, 0.0, 1.0)
        };
        assert!(both.validate().unwrap_err().contains("mutually exclusive"));
        let slow = Waypoint {
            speed: Some(0.0),
            ..Waypoint::local(0.0, 0.0, 1.0)
        };
        assert!(slow.validate().is_err());
        let geo_no_origin = Mission {
            origin: None,
            waypoints: vec![Waypoint {
                lat: Some(1.0),
                lon: Some(2.0),
                depth: Some(1.0),
                ..Waypoint::default()
            }],
        };
        assert!(geo_no_origin.validate().is_err());
    }

    #[test]
    fn geo_and_altitude_resolution() {
        let m = Mission {
            origin: Some(GeoOrigin { lat: 0.0, lon: 0.0 }),
            waypoints: vec![Waypoint {
                lat: Some(0.001),
                lon: Some(0.002),
                altitude: Some(0.5),
                ..Waypoint::default()
            }],
        };
        let enu = m.resolve(EarthFrame::Enu, 20.0).unwrap()[0];
        let deg = EARTH_RADIUS * PI / 180.0;
        assert_relative_eq!(enu.x, 0.002 * deg, epsilon = 1e-6);
        assert_relative_eq!(enu.y, 0.001 * deg, epsilon = 1e-6);
        assert_relative_eq!(enu.depth, 19.5);
        let ned = m.resolve(EarthFrame::Ned, 20.0).unwrap()[0];
        assert_relative_eq!(ned.x, enu.y);
    }

    #[test]
    fn kml_import() {
        let kml = r#"<?xml version="1.0" encoding="UTF-8"?>
<kml xmlns="http://www.opengis.net/kml/2.2"><Document><Placemark><LineString>
<coordinates>
  -71.0,41.0,-5 -71.001,41.0,-6 -71.001,41.001,-7
  -71.0,41.001 -71.0,41.0005,-2
</coordinates></LineString></Placemark></Document></kml>"#;
        let wps = import_kml(kml, 3.0).unwrap();
        assert_eq!(wps.len(), 5);
        assert_eq!(wps[0].lon, Some(-71.0));
        assert_eq!(wps[0].depth, Some(5.0));
        assert_eq!(wps[3].depth, Some(3.0));
        assert!(import_kml("<kml/>", 1.0).is_err());
        assert!(import_kml("<kml><LineString><coordinates>1</coordinates></LineString></kml>", 1.0).is_err());
    }
}

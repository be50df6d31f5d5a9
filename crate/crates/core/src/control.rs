//! Per-DOF PID control with switchable control modes.
//!
//! A control mode selects which generalized-force rows are driven and carries
//! the gains for each. Switching modes resizes the allocation problem on the
//! next tick and clears integrators of dropped channels.

use crate::allocation::{AllocationError, Allocator, ThrusterOutput};
use crate::dof::{DofId, DofSet};
use crate::frames::{euler_rate_jacobian, wrap_angle, EarthFrame, Pose, Twist};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Desired value per controlled channel.
pub type Setpoint = BTreeMap<DofId, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("unknown control mode '{0}'")]
    UnknownMode(String),
    #[error("invalid control mode '{mode}': {reason}")]
    InvalidMode { mode: String, reason: String },
    #[error("tick period {dt} s outside [0.5, 2] x nominal {nominal} s")]
    BadPeriod { dt: f64, nominal: f64 },
    #[error(transparent)]
    Allocation(#[from] AllocationError),
}

/// Navigation solution consumed by guidance and control.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Odometry {
    pub time: f64,
    pub pose: Pose,
    pub twist: Twist,
    /// Positive-down depth, meters.
    pub depth: f64,
    /// Height above the seabed, meters.
    pub altitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    #[serde(default = "unbounded")]
    pub integral_limit: f64,
    #[serde(default = "unbounded")]
    pub output_limit: f64,
}

fn unbounded() -> f64 {
    f64::INFINITY
}

impl PidGains {
    pub fn p(kp: f64) -> Self {
        Self {
            kp,
            ki: 0.0,
            kd: 0.0,
            integral_limit: f64::INFINITY,
            output_limit: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
}

/// One PID update. `error_rate` is supplied by the caller; the controller
/// passes the negated measured rate so setpoint steps cause no derivative
/// kick. The integral is clamped to `±integral_limit` and frozen while the
/// output saturates in the direction of the error.
pub fn pid_step(gains: &PidGains, error: f64, error_rate: f64, dt: f64, state: &mut PidState) -> f64 {
    let limit = gains.integral_limit.max(0.0);
    let out_limit = gains.output_limit.max(0.0);
    let candidate = (state.integral + error * dt).clamp(-limit, limit);
    let raw = |integral: f64| gains.kp * error + gains.ki * integral + gains.kd * error_rate;
    let mut out = raw(candidate);
    if out.abs() > out_limit && out.signum() == error.signum() && gains.ki != 0.0 {
        out = raw(state.integral);
    } else {
        state.integral = candidate;
    }
    out.clamp(-out_limit, out_limit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlMode {
    pub name: String,
    pub dofs: DofSet,
    pub gains: BTreeMap<DofId, PidGains>,
}

impl ControlMode {
    pub fn new(name: impl Into<String>, gains: BTreeMap<DofId, PidGains>) -> Self {
        Self {
            name: name.into(),
            dofs: gains.keys().copied().collect(),
            gains,
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let invalid = |reason: String| ControlError::InvalidMode {
            mode: self.name.clone(),
            reason,
        };
        if self.dofs.is_empty() {
            return Err(invalid("selects no degrees of freedom".into()));
        }
        let keys: DofSet = self.gains.keys().copied().collect();
        if keys != self.dofs {
            return Err(invalid("gains must be defined for exactly the selected DOFs".into()));
        }
        for dof in self.dofs.iter() {
            if dof.row() < 6 && self.dofs.contains(dof.counterpart()) {
                return Err(invalid(format!(
                    "selects both '{dof}' and its earth-frame counterpart '{}'",
                    dof.counterpart()
                )));
            }
        }
        for (dof, g) in &self.gains {
            let values = [g.kp, g.ki, g.kd];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite gain for '{dof}'")));
            }
            if !(g.integral_limit >= 0.0) || !(g.output_limit >= 0.0) {
                return Err(invalid(format!("negative limit for '{dof}'")));
            }
        }
        Ok(())
    }
}

/// Measured value and its rate for one channel.
pub fn measure(dof: DofId, odom: &Odometry, frame: EarthFrame) -> (f64, Option<f64>) {
    let att = &odom.pose.attitude;
    let earth_vel = att.rotate(&odom.twist.linear);
    let (roll, pitch, yaw) = att.euler();
    let euler_rate = |i: usize| {
        euler_rate_jacobian(roll, pitch)
            .ok()
            .map(|j| (j * odom.twist.angular)[i])
    };
    match dof {
        DofId::Surge => (odom.twist.linear.x, None),
        DofId::Sway => (odom.twist.linear.y, None),
        DofId::Heave => (odom.twist.linear.z, None),
        DofId::RollRate => (odom.twist.angular.x, None),
        DofId::PitchRate => (odom.twist.angular.y, None),
        DofId::YawRate => (odom.twist.angular.z, None),
        DofId::X => (odom.pose.position.x, Some(earth_vel.x)),
        DofId::Y => (odom.pose.position.y, Some(earth_vel.y)),
        DofId::Depth => (odom.depth, Some(frame.down().dot(&earth_vel))),
        DofId::Roll => (roll, euler_rate(0)),
        DofId::Pitch => (pitch, euler_rate(1)),
        DofId::Yaw => (yaw, euler_rate(2)),
    }
}

/// Setpoint minus measurement for every DOF of `mode`; angle errors wrap
/// into (-pi, pi]. DOFs missing from `setpoint` get zero error.
pub fn compute_errors(
    setpoint: &Setpoint,
    odom: &Odometry,
    mode: &ControlMode,
    frame: EarthFrame,
) -> Vec<(DofId, f64)> {
    mode.dofs
        .iter()
        .map(|dof| {
            let (value, _) = measure(dof, odom, frame);
            let err = match setpoint.get(&dof) {
                None => 0.0,
                Some(sp) if dof.is_angle() => wrap_angle(sp - value),
                Some(sp) => sp - value,
            };
            (dof, err)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ControlFlags {
    pub saturation: bool,
    pub gimbal: bool,
    pub fault: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    /// Setpoint actually tracked, including held values.
    pub setpoint: Vec<(DofId, f64)>,
    pub errors: Vec<(DofId, f64)>,
    pub tau_star: Vec<(DofId, f64)>,
    pub outputs: Vec<ThrusterOutput>,
    /// Number of allocation rows used this tick (0 when disabled or faulted).
    pub allocation_rows: usize,
    pub residual: f64,
    pub flags: ControlFlags,
    pub fault: Option<String>,
}

pub struct Controller {
    modes: BTreeMap<String, ControlMode>,
    active: String,
    pid: [PidState; 12],
    held: [Option<f64>; 12],
    prev_measurement: [Option<f64>; 12],
    enabled: bool,
    allocator: Allocator,
    frame: EarthFrame,
    nominal_dt: f64,
}

impl Controller {
    pub fn new(
        modes: Vec<ControlMode>,
        initial_mode: &str,
        allocator: Allocator,
        frame: EarthFrame,
        nominal_dt: f64,
    ) -> Result<Self, ControlError> {
        let mut map = BTreeMap::new();
        for m in modes {
            m.validate()?;
            map.insert(m.name.clone(), m);
        }
        if !map.contains_key(initial_mode) {
            return Err(ControlError::UnknownMode(initial_mode.to_string()));
        }
        Ok(Self {
            modes: map,
            active: initial_mode.to_string(),
            pid: [PidState::default(); 12],
            held: [None; 12],
            prev_measurement: [None; 12],
            enabled: true,
            allocator,
            frame,
            nominal_dt,
        })
    }

    pub fn mode(&self) -> &ControlMode {
        &self.modes[&self.active]
    }

    pub fn modes(&self) -> impl Iterator<Item = &ControlMode> {
        self.modes.values()
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn integral(&self, dof: DofId) -> f64 {
        self.pid[dof.row()].integral
    }

    /// Switches the active mode. Integrators of DOFs absent from the new mode
    /// are cleared; switching to the active mode changes nothing.
    pub fn set_mode(&mut self, name: &str) -> Result<(), ControlError> {
        let next = self
            .modes
            .get(name)
            .ok_or_else(|| ControlError::UnknownMode(name.to_string()))?;
        if name == self.active {
            return Ok(());
        }
        for dof in DofId::ALL {
            if !next.dofs.contains(dof) {
                self.pid[dof.row()] = PidState::default();
            }
        }
        self.active = name.to_string();
        self.allocator.reset_warm_start();
        Ok(())
    }

    fn idle_output(&self, fault: Option<String>) -> ControlOutput {
        let outputs = self.allocator.zero_output();
        ControlOutput {
            setpoint: Vec::new(),
            errors: Vec::new(),
            tau_star: Vec::new(),
            flags: ControlFlags {
                saturation: outputs.iter().any(|o| o.saturated),
                gimbal: self.allocator.gimbal_frozen(),
                fault: fault.is_some(),
            },
            outputs,
            allocation_rows: 0,
            residual: 0.0,
            fault,
        }
    }

    /// Runs errors → PID → allocation for one control period.
    pub fn tick(&mut self, odom: &Odometry, setpoint: &Setpoint, dt: f64) -> ControlOutput {
        if !self.enabled {
            return self.idle_output(None);
        }
        if !(dt >= 0.5 * self.nominal_dt && dt <= 2.0 * self.nominal_dt) {
            let e = ControlError::BadPeriod {
                dt,
                nominal: self.nominal_dt,
            };
            return self.idle_output(Some(e.to_string()));
        }
        let mode = self.modes[&self.active].clone();

        let mut tracked = Setpoint::new();
        for dof in mode.dofs.iter() {
            let value = match setpoint.get(&dof) {
                Some(v) => *v,
                None => self.held[dof.row()].unwrap_or_else(|| default_hold(dof, odom, self.frame)),
            };
            self.held[dof.row()] = Some(value);
            tracked.insert(dof, value);
        }

        let errors = compute_errors(&tracked, odom, &mode, self.frame);
        let mut tau = Vec::with_capacity(errors.len());
        for &(dof, err) in &errors {
            let (value, rate) = measure(dof, odom, self.frame);
            let prev = self.prev_measurement[dof.row()].replace(value);
            let rate = rate.unwrap_or_else(|| match prev {
                Some(p) if dof.is_angle() => wrap_angle(value - p) / dt,
                Some(p) => (value - p) / dt,
                None => 0.0,
            });
            let out = pid_step(&mode.gains[&dof], err, -rate, dt, &mut self.pid[dof.row()]);
            let row_value = if dof == DofId::Depth {
                self.frame.down_sign() * out
            } else {
                out
            };
            tau.push((dof, row_value));
        }

        let tau_vec = DVector::from_iterator(tau.len(), tau.iter().map(|t| t.1));
        match self
            .allocator
            .allocate(&odom.pose.attitude, mode.dofs, &tau_vec, dt)
        {
            Ok(sol) => ControlOutput {
                setpoint: tracked.into_iter().collect(),
                errors,
                tau_star: tau,
                flags: ControlFlags {
                    saturation: sol.saturated(),
                    gimbal: self.allocator.gimbal_frozen(),
                    fault: false,
                },
                allocation_rows: mode.dofs.len(),
                residual: sol.residual,
                outputs: sol.outputs,
                fault: None,
            },
            Err(e) => {
                let mut out = self.idle_output(Some(ControlError::from(e).to_string()));
                out.setpoint = tracked.into_iter().collect();
                out.errors = errors;
                out.tau_star = tau;
                out
            }
        }
    }
}

/// Hold value for a DOF nobody has commanded yet: the current measurement
/// for pose channels, zero for velocity channels.
fn default_hold(dof: DofId, odom: &Odometry, frame: EarthFrame) -> f64 {
    if dof.row() < 6 {
        0.0
    } else {
        measure(dof, odom, frame).0
    }
}

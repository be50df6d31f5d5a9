//! Thruster allocation: per-thruster columns of the generalized-force map,
//! constraint generation for fixed and articulated thrusters, the
//! least-squares QP, and conversion of solved forces into motor commands and
//! servo angle changes.
//!
//! Column order is part of the public contract: fixed thrusters first in
//! configuration order, then one adjacent `(X, Y)` pair per articulated
//! thruster, also in configuration order.

pub mod poly;
pub mod qp;

use crate::dof::DofSet;
use crate::frames::{euler_rate_jacobian, Attitude, FrameError, Transform, Vec3};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub use poly::{CommandSolve, ThrustPolynomial};

/// Constraint satisfaction tolerance for solutions.
pub const FEASIBILITY_EPS: f64 = 1e-6;
/// Margin replacing the strict fan inequalities.
pub const STRICT_EPS: f64 = 1e-9;
/// Below this force an articulated thruster holds its angle.
pub const DEADBAND_FORCE: f64 = 0.05;
/// Largest admissible fan half-angle; tan() diverges beyond it.
pub const MAX_FAN_HALF_ANGLE: f64 = FRAC_PI_2 - 1e-3;
/// Tikhonov weight added to MᵀM so redundant thruster sets stay strictly convex.
pub const REGULARIZATION: f64 = 1e-9;

pub type Column = SVector<f64, 12>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("degree-of-freedom mask selects no rows")]
    EmptyDofMask,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("allocation problem is infeasible: {0}")]
    Infeasible(String),
    #[error("QP solver did not converge: {0}")]
    SolverNotConverged(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedThruster {
    pub id: String,
    /// Thruster frame expressed in the body frame.
    pub mount: Transform,
    pub force_min: f64,
    pub force_max: f64,
    pub poly: ThrustPolynomial,
    pub command_min: f64,
    pub command_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticulatedThruster {
    /// Mounting at zero servo angle; the servo turns about this frame's z axis.
    pub thruster: FixedThruster,
    /// Servo slew rate, rad/s.
    pub servo_rate: f64,
    pub angle_min: f64,
    pub angle_max: f64,
    pub current_angle: f64,
}

impl ArticulatedThruster {
    /// Mount of the thruster frame at its current servo angle.
    pub fn current_mount(&self) -> Transform {
        self.mount_at(self.current_angle)
    }

    pub fn mount_at(&self, angle: f64) -> Transform {
        let spin = Transform::new(crate::frames::rotation_from_euler(0.0, 0.0, angle), Vec3::zeros());
        self.thruster.mount.compose(&spin)
    }

    /// Fan half-angles `(below, above)` the current angle reachable within
    /// `dt`, tightened near the servo limits.
    pub fn fan_half_angles(&self, dt: f64) -> (f64, f64) {
        let sweep = self.servo_rate * dt;
        let below = sweep.min(self.current_angle - self.angle_min);
        let above = sweep.min(self.angle_max - self.current_angle);
        (
            below.clamp(0.0, MAX_FAN_HALF_ANGLE),
            above.clamp(0.0, MAX_FAN_HALF_ANGLE),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thruster {
    Fixed(FixedThruster),
    Articulated(ArticulatedThruster),
}

impl Thruster {
    pub fn spec(&self) -> &FixedThruster {
        match self {
            Thruster::Fixed(t) => t,
            Thruster::Articulated(a) => &a.thruster,
        }
    }

    pub fn id(&self) -> &str {
        &self.spec().id
    }

    pub fn is_articulated(&self) -> bool {
        matches!(self, Thruster::Articulated(_))
    }
}

/// Earth-frame rotation and Euler-rate Jacobian used to fill rows 7–12.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthKinematics {
    pub rotation: Matrix3<f64>,
    pub jacobian: Matrix3<f64>,
}

impl EarthKinematics {
    pub fn from_attitude(attitude: &Attitude) -> Result<Self, FrameError> {
        let (roll, pitch, _) = attitude.euler();
        Ok(Self {
            rotation: attitude.rotation_matrix(),
            jacobian: euler_rate_jacobian(roll, pitch)?,
        })
    }
}

/// Column for a unit force along `direction` (thruster frame) of a thruster
/// mounted at `mount`.
pub fn column_for_direction(mount: &Transform, direction: &Vec3, kin: &EarthKinematics) -> Column {
    let force = mount.rotation.rotate(direction);
    let moment = mount.translation.cross(&force);
    let earth_force = kin.rotation * force;
    let earth_moment = kin.jacobian * moment;
    let mut col = Column::zeros();
    col.fixed_rows_mut::<3>(0).copy_from(&force);
    col.fixed_rows_mut::<3>(3).copy_from(&moment);
    col.fixed_rows_mut::<3>(6).copy_from(&earth_force);
    col.fixed_rows_mut::<3>(9).copy_from(&earth_moment);
    col
}

pub fn column_fixed(t: &FixedThruster, attitude: &Attitude) -> Result<Column, AllocationError> {
    let kin = EarthKinematics::from_attitude(attitude)?;
    Ok(column_for_direction(&t.mount, &Vec3::x(), &kin))
}

pub fn columns_articulated(
    t: &ArticulatedThruster,
    attitude: &Attitude,
) -> Result<SMatrix<f64, 12, 2>, AllocationError> {
    let kin = EarthKinematics::from_attitude(attitude)?;
    Ok(articulated_columns_with(t, &kin))
}

fn articulated_columns_with(t: &ArticulatedThruster, kin: &EarthKinematics) -> SMatrix<f64, 12, 2> {
    let mount = t.current_mount();
    let mut m = SMatrix::<f64, 12, 2>::zeros();
    m.set_column(0, &column_for_direction(&mount, &Vec3::x(), kin));
    m.set_column(1, &column_for_direction(&mount, &Vec3::y(), kin));
    m
}

/// Where a thruster's decision variables live in `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub thruster: usize,
    /// First column; articulated thrusters also own `column + 1`.
    pub column: usize,
    pub articulated: bool,
}

/// Stable column layout for a thruster list.
pub fn column_layout(thrusters: &[Thruster]) -> Vec<Slot> {
    let fixed = thrusters.iter().enumerate().filter(|(_, t)| !t.is_articulated());
    let artic = thrusters.iter().enumerate().filter(|(_, t)| t.is_articulated());
    let mut slots = Vec::with_capacity(thrusters.len());
    let mut col = 0;
    for (i, _) in fixed {
        slots.push(Slot {
            thruster: i,
            column: col,
            articulated: false,
        });
        col += 1;
    }
    for (i, _) in artic {
        slots.push(Slot {
            thruster: i,
            column: col,
            articulated: true,
        });
        col += 2;
    }
    slots
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    /// Selected rows of the allocation matrix, `d × (N + 2M_a)`.
    pub m: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub tau_star: DVector<f64>,
    pub dofs: DofSet,
    pub layout: Vec<Slot>,
    /// A point satisfying every constraint, used to start the solver.
    pub feasible_start: DVector<f64>,
}

impl AllocationProblem {
    pub fn variables(&self) -> usize {
        self.m.ncols()
    }

    pub fn objective(&self, f: &DVector<f64>) -> f64 {
        (&self.tau_star - &self.m * f).norm_squared()
    }

    pub fn max_violation(&self, f: &DVector<f64>) -> f64 {
        (&self.a * f - &self.b).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn build_problem(
    thrusters: &[Thruster],
    attitude: &Attitude,
    dofs: DofSet,
    tau_star: &DVector<f64>,
    dt: f64,
) -> Result<AllocationProblem, AllocationError> {
    let kin = EarthKinematics::from_attitude(attitude)?;
    build_problem_with(thrusters, &kin, dofs, tau_star, dt)
}

pub fn build_problem_with(
    thrusters: &[Thruster],
    kin: &EarthKinematics,
    dofs: DofSet,
    tau_star: &DVector<f64>,
    dt: f64,
) -> Result<AllocationProblem, AllocationError> {
    if dofs.is_empty() {
        return Err(AllocationError::EmptyDofMask);
    }
    if tau_star.len() != dofs.len() {
        return Err(AllocationError::DimensionMismatch {
            expected: dofs.len(),
            got: tau_star.len(),
        });
    }
    let layout = column_layout(thrusters);
    let n_fixed = layout.iter().filter(|s| !s.articulated).count();
    let n_artic = layout.len() - n_fixed;
    let n = n_fixed + 2 * n_artic;
    let rows: Vec<usize> = dofs.iter().map(|d| d.row()).collect();

    let mut full = DMatrix::zeros(12, n);
    let mut a = DMatrix::zeros(2 * n_fixed + 3 * n_artic, n);
    let mut b = DVector::zeros(a.nrows());
    let mut start = DVector::zeros(n);
    let mut r = 0;
    for slot in &layout {
        let c = slot.column;
        match &thrusters[slot.thruster] {
            Thruster::Fixed(t) => {
                full.set_column(c, &column_for_direction(&t.mount, &Vec3::x(), kin));
                a[(r, c)] = 1.0;
                b[r] = t.force_max;
                a[(r + 1, c)] = -1.0;
                b[r + 1] = -t.force_min;
                r += 2;
                start[c] = 0.0f64.clamp(t.force_min, t.force_max);
            }
            Thruster::Articulated(t) => {
                let cols = articulated_columns_with(t, kin);
                full.set_column(c, &cols.column(0));
                full.set_column(c + 1, &cols.column(1));
                let (below, above) = t.fan_half_angles(dt);
                let (t_below, t_above) = (below.tan(), above.tan());
                let t_max = t.thruster.force_max;
                // X ≤ T_max
                a[(r, c)] = 1.0;
                b[r] = t_max;
                // tan(below)·X + Y ≥ ε
                a[(r + 1, c)] = -t_below;
                a[(r + 1, c + 1)] = -1.0;
                b[r + 1] = -STRICT_EPS;
                // −tan(above)·X + Y ≤ −ε
                a[(r + 2, c)] = -t_above;
                a[(r + 2, c + 1)] = 1.0;
                b[r + 2] = -STRICT_EPS;
                r += 3;

                let opening = t_below + t_above;
                let x_min = 2.0 * STRICT_EPS / opening;
                if !(opening > 0.0) || x_min > t_max {
                    return Err(AllocationError::Infeasible(format!(
                        "thruster '{}' has an empty force fan",
                        t.thruster.id
                    )));
                }
                let x0 = (2.0 * x_min).min(t_max);
                start[c] = x0;
                start[c + 1] = 0.5 * (t_above - t_below) * x0;
            }
        }
    }

    let m = full.select_rows(rows.iter());
    Ok(AllocationProblem {
        m,
        a,
        b,
        tau_star: tau_star.clone(),
        dofs,
        layout,
        feasible_start: start,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub forces: DVector<f64>,
    /// ‖τ* − M F‖.
    pub residual: f64,
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Solves `argmin ‖τ* − M F‖²  s.t. A F ≤ B`.
pub fn solve(problem: &AllocationProblem) -> Result<QpSolution, AllocationError> {
    solve_warm(problem, &[])
}

pub fn solve_warm(problem: &AllocationProblem, warm: &[usize]) -> Result<QpSolution, AllocationError> {
    let m = &problem.m;
    let n = m.ncols();
    let h = m.transpose() * m + DMatrix::identity(n, n) * REGULARIZATION;
    let c = -(m.transpose() * &problem.tau_star);
    let out = qp::solve(
        &h,
        &c,
        &problem.a,
        &problem.b,
        &problem.feasible_start,
        warm,
        &qp::QpOptions::default(),
    )
    .map_err(|e| match e {
        qp::QpError::InfeasibleStart { .. } => AllocationError::Infeasible(e.to_string()),
        _ => AllocationError::SolverNotConverged(e.to_string()),
    })?;
    let residual = (&problem.tau_star - m * &out.x).norm();
    Ok(QpSolution {
        forces: out.x,
        residual,
        active: out.active,
        iterations: out.iterations,
    })
}

/// Thrust magnitude and servo angle change from the two in-frame components.
/// Below the deadband the servo holds and `(0, 0)` is returned.
pub fn recover_articulated(x: f64, y: f64) -> (f64, f64) {
    let force = x.hypot(y);
    if force < DEADBAND_FORCE {
        (0.0, 0.0)
    } else {
        (force, y.atan2(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThrusterOutput {
    pub id: String,
    pub force: f64,
    pub command: f64,
    /// Servo angle change this tick (articulated only).
    pub angle_delta: Option<f64>,
    /// Commanded servo angle after the change (articulated only).
    pub angle: Option<f64>,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSolution {
    pub forces: DVector<f64>,
    /// One entry per thruster, in configuration order.
    pub outputs: Vec<ThrusterOutput>,
    pub residual: f64,
}

impl AllocationSolution {
    pub fn saturated(&self) -> bool {
        self.outputs.iter().any(|o| o.saturated)
    }
}

/// Allocation state owned by the control loop: thruster angles, the
/// warm-start active set and the last valid Euler-rate Jacobian.
#[derive(Debug, Clone)]
pub struct Allocator {
    thrusters: Vec<Thruster>,
    warm: Vec<usize>,
    warm_shape: (usize, DofSet),
    last_jacobian: Matrix3<f64>,
    gimbal_frozen: bool,
}

impl Allocator {
    pub fn new(thrusters: Vec<Thruster>) -> Self {
        Self {
            thrusters,
            warm: Vec::new(),
            warm_shape: (0, DofSet::EMPTY),
            last_jacobian: Matrix3::identity(),
            gimbal_frozen: false,
        }
    }

    pub fn thrusters(&self) -> &[Thruster] {
        &self.thrusters
    }

    pub fn columns(&self) -> usize {
        self.thrusters
            .iter()
            .map(|t| if t.is_articulated() { 2 } else { 1 })
            .sum()
    }

    /// True when the last call froze the earth torque rows near gimbal lock.
    pub fn gimbal_frozen(&self) -> bool {
        self.gimbal_frozen
    }

    /// Earth kinematics, freezing the Jacobian at its last valid value when
    /// the attitude is too close to gimbal lock.
    pub fn kinematics(&mut self, attitude: &Attitude) -> EarthKinematics {
        let (roll, pitch, _) = attitude.euler();
        let jacobian = match euler_rate_jacobian(roll, pitch) {
            Ok(j) => {
                self.gimbal_frozen = false;
                self.last_jacobian = j;
                j
            }
            Err(_) => {
                self.gimbal_frozen = true;
                self.last_jacobian
            }
        };
        EarthKinematics {
            rotation: attitude.rotation_matrix(),
            jacobian,
        }
    }

    pub fn build(
        &mut self,
        attitude: &Attitude,
        dofs: DofSet,
        tau_star: &DVector<f64>,
        dt: f64,
    ) -> Result<AllocationProblem, AllocationError> {
        let kin = self.kinematics(attitude);
        build_problem_with(&self.thrusters, &kin, dofs, tau_star, dt)
    }

    /// Builds and solves the allocation problem, then converts forces into
    /// commands and advances the commanded servo angles.
    pub fn allocate(
        &mut self,
        attitude: &Attitude,
        dofs: DofSet,
        tau_star: &DVector<f64>,
        dt: f64,
    ) -> Result<AllocationSolution, AllocationError> {
        let problem = self.build(attitude, dofs, tau_star, dt)?;
        let shape = (problem.variables(), dofs);
        let warm = if shape == self.warm_shape {
            self.warm.clone()
        } else {
            Vec::new()
        };
        let sol = solve_warm(&problem, &warm)?;
        self.warm = sol.active.clone();
        self.warm_shape = shape;

        let mut outputs: Vec<Option<ThrusterOutput>> = vec![None; self.thrusters.len()];
        for slot in &problem.layout {
            let out = match &mut self.thrusters[slot.thruster] {
                Thruster::Fixed(t) => {
                    let force = sol.forces[slot.column];
                    let s = t.poly.force_to_command(force, t.command_min, t.command_max);
                    ThrusterOutput {
                        id: t.id.clone(),
                        force,
                        command: s.command,
                        angle_delta: None,
                        angle: None,
                        saturated: s.saturated,
                    }
                }
                Thruster::Articulated(t) => {
                    let (force, delta) =
                        recover_articulated(sol.forces[slot.column], sol.forces[slot.column + 1]);
                    let angle = (t.current_angle + delta).clamp(t.angle_min, t.angle_max);
                    let applied = angle - t.current_angle;
                    t.current_angle = angle;
                    let spec = &t.thruster;
                    let s = spec
                        .poly
                        .force_to_command(force, spec.command_min, spec.command_max);
                    ThrusterOutput {
                        id: spec.id.clone(),
                        force,
                        command: s.command,
                        angle_delta: Some(applied),
                        angle: Some(angle),
                        saturated: s.saturated,
                    }
                }
            };
            outputs[slot.thruster] = Some(out);
        }
        Ok(AllocationSolution {
            forces: sol.forces,
            outputs: outputs.into_iter().map(|o| o.expect("every thruster has a slot")).collect(),
            residual: sol.residual,
        })
    }

    /// Commands producing zero force with every servo held.
    pub fn zero_output(&self) -> Vec<ThrusterOutput> {
        self.thrusters
            .iter()
            .map(|t| {
                let spec = t.spec();
                let s = spec.poly.force_to_command(0.0, spec.command_min, spec.command_max);
                let angle = match t {
                    Thruster::Articulated(a) => Some(a.current_angle),
                    Thruster::Fixed(_) => None,
                };
                ThrusterOutput {
                    id: spec.id.clone(),
                    force: 0.0,
                    command: s.command,
                    angle_delta: angle.map(|_| 0.0),
                    angle,
                    saturated: s.saturated,
                }
            })
            .collect()
    }

    /// Forgets the warm-start set, e.g. after a mode change.
    pub fn reset_warm_start(&mut self) {
        self.warm.clear();
        self.warm_shape = (0, DofSet::EMPTY);
    }
}

//! Guidance, navigation and control for a simulated underwater vehicle.
//!
//! The control path is `guidance` (behaviors arbitrated per degree of
//! freedom) → `control` (per-DOF PID producing a requested generalized
//! force) → `allocation` (least-squares QP over fixed and articulated
//! thrusters). `dynamics` closes the loop and `runner` composes everything
//! into a deterministic tick loop with telemetry. `batch` fans independent
//! solves and simulations out across threads.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod batch;
pub mod config;
pub mod control;
pub mod dof;
pub mod dynamics;
pub mod frames;
pub mod guidance;
pub mod runner;

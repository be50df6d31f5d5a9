//! Independent workloads fanned out across threads when the `parallel`
//! feature is on, run in order otherwise. The sequential variants are
//! always available so both paths can be compared.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::allocation::{solve, AllocationError, AllocationProblem, QpSolution};
use crate::config::System;
use crate::guidance::EVENT_MISSION_DONE;
use crate::runner::{Runner, RunnerError};

/// Maps `f` over `items`, in parallel when the feature is enabled.
/// Output order matches input order either way.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

pub fn solve_many(problems: &[AllocationProblem]) -> Vec<Result<QpSolution, AllocationError>> {
    map(problems, solve)
}

pub fn solve_many_sequential(problems: &[AllocationProblem]) -> Vec<Result<QpSolution, AllocationError>> {
    map_sequential(problems, solve)
}

/// Outcome of one dead-reckoning run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSample {
    pub seed: u64,
    /// Horizontal distance between start and end truth positions, m.
    pub distance: f64,
    /// Horizontal odometry error at the end of the run, m.
    pub error: f64,
    pub time: f64,
    /// Whether the mission finished before the time limit.
    pub completed: bool,
}

/// Runs `system` with `seed` until the mission completes or `max_duration`
/// elapses.
pub fn drift_run(system: &System, seed: u64, max_duration: f64) -> Result<DriftSample, RunnerError> {
    let mut system = system.clone();
    system.runner.seed = seed;
    let mut runner = Runner::new(&system)?;
    let start = runner.sim_state().pose.position;
    let total = runner.ticks_for(max_duration);
    let mut completed = false;
    while runner.ticks() < total && !completed {
        let record = runner.tick()?;
        completed = record.events.iter().any(|e| e == EVENT_MISSION_DONE);
    }
    let record = runner
        .last_record()
        .ok_or_else(|| RunnerError::Setup("run produced no ticks".into()))?;
    let (truth, odom) = (record.truth.position, record.odometry.position);
    Ok(DriftSample {
        seed,
        distance: (truth[0] - start.x).hypot(truth[1] - start.y),
        error: (odom[0] - truth[0]).hypot(odom[1] - truth[1]),
        time: record.time,
        completed,
    })
}

/// Monte Carlo sweep of [`drift_run`] over seeds.
pub fn drift_sweep(system: &System, seeds: &[u64], max_duration: f64) -> Result<Vec<DriftSample>, RunnerError> {
    map(seeds, |&s| drift_run(system, s, max_duration)).into_iter().collect()
}

pub fn drift_sweep_sequential(
    system: &System,
    seeds: &[u64],
    max_duration: f64,
) -> Result<Vec<DriftSample>, RunnerError> {
    map_sequential(seeds, |&s| drift_run(system, s, max_duration)).into_iter().collect()
}

//! Dense primal active-set solver for small strictly convex QPs:
//!
//! ```text
//! min ½ xᵀHx + cᵀx   s.t.  A x ≤ b
//! ```
//!
//! Starts from a caller-supplied feasible point and optionally tries a
//! warm-start working set first.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iterations: usize,
    /// Tolerance on constraint activity and on Lagrange multiplier signs.
    pub tolerance: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("starting point violates constraint {row} by {violation:e}")]
    InfeasibleStart { row: usize, violation: f64 },
    #[error("active-set iteration did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("singular KKT system")]
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOutput {
    pub x: DVector<f64>,
    /// Indices of constraints active at the solution.
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Solves the equality-constrained step `min ½pᵀHp + gᵀp s.t. A_W p = 0`.
/// Returns the step and the multipliers of the working set.
fn eqp_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    working: &[usize],
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let n = h.nrows();
    let m = working.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    for (k, &row) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + k, j)] = a[(row, j)];
            kkt[(j, n + k)] = a[(row, j)];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));

    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => kkt
            .svd(true, true)
            .solve(&rhs, 1e-13)
            .map_err(|_| QpError::Singular)?,
    };
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// Solves `min ½ xᵀHx + cᵀx` on the affine set `A_W x = b_W`.
fn solve_on_working_set(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    working: &[usize],
) -> Option<DVector<f64>> {
    let n = h.nrows();
    let m = working.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-c));
    for (k, &row) in working.iter().enumerate() {
        for j in 0..n {
            kkt[(n + k, j)] = a[(row, j)];
            kkt[(j, n + k)] = a[(row, j)];
        }
        rhs[n + k] = b[row];
    }
    let sol = kkt.lu().solve(&rhs)?;
    sol.iter()
        .all(|v| v.is_finite())
        .then(|| sol.rows(0, n).into_owned())
}

fn max_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> (usize, f64) {
    let r = a * x - b;
    r.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc })
}

pub fn solve(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: &DVector<f64>,
    warm: &[usize],
    opts: &QpOptions,
) -> Result<QpOutput, QpError> {
    let feas_tol = 1e-9;
    let (mut x, mut working) = (x0.clone(), Vec::new());
    if a.nrows() > 0 {
        let (row, v) = max_violation(a, b, x0);
        if v > feas_tol {
            return Err(QpError::InfeasibleStart { row, violation: v });
        }
    }

    if !warm.is_empty() && warm.iter().all(|&r| r < a.nrows()) {
        if let Some(xw) = solve_on_working_set(h, c, a, b, warm) {
            if max_violation(a, b, &xw).1 <= feas_tol {
                x = xw;
                working = warm.to_vec();
            }
        }
    }

    // Consecutive zero-length steps; past a threshold, Bland's smallest-index
    // rule replaces the greedy choices to break cycling.
    let mut stalled = 0usize;
    let bland_after = a.nrows() + 2;
    for iter in 0..opts.max_iterations {
        let g = h * &x + c;
        let (p, lambda) = eqp_step(h, &g, a, &working)?;
        let scale = 1.0 + x.amax();
        // Predicted decrease along p; in nearly flat directions the step is
        // dominated by round-off and gains nothing.
        let decrease = -(g.dot(&p) + 0.5 * p.dot(&(h * &p)));
        let objective = 0.5 * x.dot(&(h * &x)) + c.dot(&x);
        if working.len() >= h.nrows()
            || p.amax() <= 1e-11 * scale
            || decrease <= 1e-13 * (1.0 + objective.abs())
        {
            let negative = lambda
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -opts.tolerance * (1.0 + g.amax()));
            let leaving = if stalled > bland_after {
                negative.min_by_key(|(k, _)| working[*k])
            } else {
                negative.min_by(|x, y| x.1.total_cmp(y.1))
            };
            match leaving {
                None => {
                    working.sort_unstable();
                    return Ok(QpOutput {
                        x,
                        active: working,
                        iterations: iter + 1,
                    });
                }
                Some((k, _)) => {
                    working.remove(k);
                }
            }
            continue;
        }

        let ap = a * &p;
        let ax = a * &x;
        let p_norm = p.norm();
        let mut step = 1.0;
        let mut blocking = None;
        for i in 0..a.nrows() {
            if working.contains(&i) {
                continue;
            }
            // a_i·p must be clearly positive relative to |a_i||p|; this also
            // keeps rows dependent on the working set out of it.
            if ap[i] <= 1e-9 * a.row(i).norm() * p_norm {
                continue;
            }
            let slack = (b[i] - ax[i]).max(0.0);
            let t = slack / ap[i];
            if t < step || (t == step && blocking.is_some_and(|j| stalled > bland_after && i < j)) {
                step = t;
                blocking = Some(i);
            }
        }
        stalled = if step == 0.0 { stalled + 1 } else { 0 };
        x += step * p;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(QpError::NotConverged(opts.max_iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unconstrained_minimum_inside_box() {
        let h = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![-1.0, -2.0]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![5.0, 5.0, 5.0, 5.0]);
        let out = solve(&h, &c, &a, &b, &DVector::zeros(2), &[], &QpOptions::default()).unwrap();
        assert_relative_eq!(out.x, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-12);
        assert!(out.active.is_empty());
    }

    #[test]
    fn active_bound() {
        let h = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![-10.0, 0.5]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![3.0, 3.0, 3.0, 3.0]);
        let out = solve(&h, &c, &a, &b, &DVector::zeros(2), &[], &QpOptions::default()).unwrap();
        assert_relative_eq!(out.x, DVector::from_vec(vec![3.0, -0.5]), epsilon = 1e-12);
        assert_eq!(out.active, vec![0]);

        // warm start from the previous active set reaches the same point
        let warm = solve(&h, &c, &a, &b, &DVector::zeros(2), &out.active, &QpOptions::default())
            .unwrap();
        assert_relative_eq!(warm.x, out.x, epsilon = 1e-12);
        assert!(warm.iterations <= out.iterations);
    }

    #[test]
    fn bad_warm_start_is_ignored() {
        let h = DMatrix::identity(1, 1);
        let c = DVector::from_vec(vec![-1.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![5.0, 5.0]);
        let out = solve(&h, &c, &a, &b, &DVector::zeros(1), &[1], &QpOptions::default()).unwrap();
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_start_rejected() {
        let h = DMatrix::identity(1, 1);
        let c = DVector::zeros(1);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DVector::from_vec(vec![-1.0]);
        assert!(matches!(
            solve(&h, &c, &a, &b, &DVector::zeros(1), &[], &QpOptions::default()),
            Err(QpError::InfeasibleStart { row: 0, .. })
        ));
    }
}

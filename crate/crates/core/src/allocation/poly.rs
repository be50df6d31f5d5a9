//! Thrust-command polynomial `F = Σ a_i u^i` and its monotone inverse.

use serde::{Deserialize, Serialize};

/// Number of samples used when checking that a polynomial is monotone.
const MONOTONE_SAMPLES: usize = 4096;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThrustPolynomial {
    coeffs: Vec<f64>,
}

/// Result of inverting the polynomial for a requested force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandSolve {
    pub command: f64,
    /// The requested force lay outside the reachable range and was clamped.
    pub saturated: bool,
}

impl ThrustPolynomial {
    /// Coefficients in ascending order, `a_0` first.
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, a| acc * u + a)
    }

    pub fn derivative(&self) -> ThrustPolynomial {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, a)| a * i as f64)
            .collect();
        ThrustPolynomial { coeffs }
    }

    /// True when the polynomial is strictly monotone on `[lo, hi]`.
    ///
    /// The derivative may touch zero at isolated points but must not change
    /// sign, and the sampled values must be strictly ordered.
    pub fn is_strictly_monotone(&self, lo: f64, hi: f64) -> bool {
        if !(lo < hi) || self.coeffs.iter().any(|a| !a.is_finite()) {
            return false;
        }
        let d = self.derivative();
        let step = (hi - lo) / MONOTONE_SAMPLES as f64;
        let sample = |i: usize| lo + step * i as f64;
        let (mut pos, mut neg) = (false, false);
        for i in 0..=MONOTONE_SAMPLES {
            let slope = d.eval(sample(i));
            if slope > 0.0 {
                pos = true;
            } else if slope < 0.0 {
                neg = true;
            }
        }
        if pos == neg {
            return false;
        }
        let sign = if pos { 1.0 } else { -1.0 };
        (0..MONOTONE_SAMPLES).all(|i| sign * (self.eval(sample(i + 1)) - self.eval(sample(i))) > 0.0)
    }

    pub fn command_to_force(&self, u: f64) -> f64 {
        self.eval(u)
    }

    /// Inverts the polynomial on `[command_min, command_max]` by bisection.
    /// Unreachable forces are clamped to the nearest end of the range.
    pub fn force_to_command(&self, force: f64, command_min: f64, command_max: f64) -> CommandSolve {
        let f_lo = self.eval(command_min);
        let f_hi = self.eval(command_max);
        let increasing = f_hi >= f_lo;
        let (reach_lo, reach_hi) = if increasing { (f_lo, f_hi) } else { (f_hi, f_lo) };
        if force <= reach_lo || force >= reach_hi {
            let saturated = force < reach_lo || force > reach_hi;
            let at_low_force = force <= reach_lo;
            let command = if at_low_force == increasing {
                command_min
            } else {
                command_max
            };
            return CommandSolve { command, saturated };
        }

        let (mut lo, mut hi) = (command_min, command_max);
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..MAX_BISECTIONS {
            mid = 0.5 * (lo + hi);
            let r = self.eval(mid) - force;
            if r == 0.0 {
                break;
            }
            if (r < 0.0) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
                break;
            }
        }
        CommandSolve {
            command: mid,
            saturated: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_inverse() {
        let p = ThrustPolynomial::new(vec![0.0, 2.0]);
        let s = p.force_to_command(4.0, -10.0, 10.0);
        assert_relative_eq!(s.command, 2.0, epsilon = 1e-9);
        assert!(!s.saturated);
    }

    #[test]
    fn quadratic_inverse() {
        let p = ThrustPolynomial::new(vec![0.0, 0.0, 1.0]);
        assert!(p.is_strictly_monotone(0.0, 10.0));
        assert_relative_eq!(p.force_to_command(9.0, 0.0, 10.0).command, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn round_trip_example() {
        let p = ThrustPolynomial::new(vec![0.5, 1.2, 0.8]);
        let f = p.command_to_force(2.7);
        assert_relative_eq!(p.force_to_command(f, 0.0, 5.0).command, 2.7, epsilon = 1e-6);
    }

    #[test]
    fn saturation_clamps_and_flags() {
        let p = ThrustPolynomial::new(vec![0.0, 2.0]);
        let s = p.force_to_command(50.0, -1.0, 1.0);
        assert_eq!(s.command, 1.0);
        assert!(s.saturated);
        let s = p.force_to_command(-50.0, -1.0, 1.0);
        assert_eq!(s.command, -1.0);
        assert!(s.saturated);
        // decreasing polynomial clamps to the opposite end
        let p = ThrustPolynomial::new(vec![0.0, -2.0]);
        let s = p.force_to_command(50.0, -1.0, 1.0);
        assert_eq!(s.command, -1.0);
        assert!(s.saturated);
    }

    #[test]
    fn exact_bound_is_not_saturated() {
        let p = ThrustPolynomial::new(vec![0.0, 2.0]);
        let s = p.force_to_command(2.0, -1.0, 1.0);
        assert_eq!(s.command, 1.0);
        assert!(!s.saturated);
    }

    /// Independent check: sign of the derivative on a dense grid.
    fn derivative_sign_changes(coeffs: &[f64], lo: f64, hi: f64) -> bool {
        let d = |u: f64| {
            coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, a)| a * i as f64 * u.powi(i as i32 - 1))
                .sum::<f64>()
        };
        let signs: Vec<f64> = (0..=1000)
            .map(|i| d(lo + (hi - lo) * i as f64 / 1000.0))
            .filter(|s| *s != 0.0)
            .map(f64::signum)
            .collect();
        signs.windows(2).any(|w| w[0] != w[1])
    }

    #[test]
    fn non_monotone_rejected() {
        let coeffs = [0.0, 1.0, -5.0];
        assert!(derivative_sign_changes(&coeffs, -1.0, 1.0));
        assert!(!ThrustPolynomial::new(coeffs.to_vec()).is_strictly_monotone(-1.0, 1.0));
        assert!(!ThrustPolynomial::new(vec![3.0]).is_strictly_monotone(-1.0, 1.0));
        assert!(ThrustPolynomial::new(vec![0.0, 20.0, 0.0, 15.0]).is_strictly_monotone(-1.0, 1.0));
    }

    proptest! {
        #[test]
        fn round_trip_on_cubic(a1 in 1.0f64..40.0, a3 in 0.0f64..30.0, u in -1.0f64..1.0) {
            let p = ThrustPolynomial::new(vec![0.0, a1, 0.0, a3]);
            let f = p.command_to_force(u);
            let s = p.force_to_command(f, -1.0, 1.0);
            prop_assert!((s.command - u).abs() < 1e-6);
            prop_assert!((p.command_to_force(s.command) - f).abs() <= 1e-9 * f.abs().max(1.0));
        }
    }
}

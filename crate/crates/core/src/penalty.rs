//! The convex boundary potential, its penalized derivative and its proximal map.
//!
//! The potential charges the trace on the thin set with slope `lambda_plus`
//! on the positive side and `lambda_minus` on the negative side:
//!
//! ```text
//! B(s) = lambda_plus * s   (s > 0),   0   (s = 0),   -lambda_minus * s   (s < 0)
//! ```
//!
//! `beta_eps` is the monotone ramp that smooths the subdifferential of `B`
//! over `(-eps, eps)`; `prox_b` is the exact minimizer of
//! `(a/2)(s - q)^2 + w B(s)`, the per-thin-node subproblem of the direct
//! solver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PenaltyError {
    #[error("invalid penalty parameters: {0}")]
    Invalid(String),
}

/// Slopes of the thin-boundary potential and the penalization width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub epsilon: f64,
}

impl PenaltyParams {
    pub fn new(lambda_plus: f64, lambda_minus: f64, epsilon: f64) -> Result<Self, PenaltyError> {
        let p = PenaltyParams { lambda_plus, lambda_minus, epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PenaltyError> {
        if !(self.lambda_plus > 0.0) || !(self.lambda_minus > 0.0) {
            return Err(PenaltyError::Invalid(format!(
                "lambda_plus and lambda_minus must be positive, got {} / {}",
                self.lambda_plus, self.lambda_minus
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(PenaltyError::Invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `Lambda = max(lambda_plus, lambda_minus)`, the uniform bound on `|beta_eps|`.
    pub fn lambda(&self) -> f64 {
        self.lambda_plus.max(self.lambda_minus)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        PenaltyParams { epsilon, ..*self }
    }
}

/// Shape of the smoothed ramp on `(-eps, eps)`.
///
/// The piecewise-linear ramp is primary (exactly integrable, closed-form
/// Lipschitz constant `(lambda_plus + lambda_minus) / (2 eps)`); the C^1
/// cubic is kept behind this switch for smoothness-sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaShape {
    #[default]
    Linear,
    Cubic,
}

/// `B(s)`: nonnegative, convex, piecewise linear.
pub fn b_value(s: f64, p: &PenaltyParams) -> f64 {
    if s > 0.0 {
        p.lambda_plus * s
    } else if s < 0.0 {
        -p.lambda_minus * s
    } else {
        0.0
    }
}

/// Penalized derivative: `-lambda_minus` for `s <= -eps`, `lambda_plus` for
/// `s >= eps`, the selected monotone ramp in between.
pub fn beta_eps(s: f64, p: &PenaltyParams, shape: BetaShape) -> f64 {
    if s >= p.epsilon {
        return p.lambda_plus;
    }
    if s <= -p.epsilon {
        return -p.lambda_minus;
    }
    match shape {
        BetaShape::Linear => {
            let slope = (p.lambda_plus + p.lambda_minus) / (2.0 * p.epsilon);
            let mid = (p.lambda_plus - p.lambda_minus) / 2.0;
            mid + slope * s
        }
        BetaShape::Cubic => {
            // Hermite smoothstep between (-eps, -lambda_minus) and (eps, lambda_plus)
            // with zero end slopes, so the global ramp is C^1.
            let x = (s + p.epsilon) / (2.0 * p.epsilon);
            let h = x * x * (3.0 - 2.0 * x);
            -p.lambda_minus + (p.lambda_plus + p.lambda_minus) * h
        }
    }
}

/// Generalized derivative of `beta_eps`; at the kinks of the linear ramp the
/// interior value is returned (the semismooth Newton selection).
pub fn beta_eps_slope(s: f64, p: &PenaltyParams, shape: BetaShape) -> f64 {
    if s.abs() > p.epsilon {
        return 0.0;
    }
    match shape {
        BetaShape::Linear => (p.lambda_plus + p.lambda_minus) / (2.0 * p.epsilon),
        BetaShape::Cubic => {
            if s.abs() >= p.epsilon {
                return 0.0;
            }
            let x = (s + p.epsilon) / (2.0 * p.epsilon);
            (p.lambda_plus + p.lambda_minus) * 6.0 * x * (1.0 - x) / (2.0 * p.epsilon)
        }
    }
}

/// Exact minimizer of `(a/2)(s - q)^2 + w B(s)` for `a > 0`, `w >= 0`.
///
/// An asymmetric soft threshold: shrink positive `q` by `w lambda_plus / a`,
/// negative `q` by `w lambda_minus / a`, and map the dead zone to zero.
/// Nonexpansive in `q`; the identity when `w = 0`.
pub fn prox_b(q: f64, a: f64, w: f64, p: &PenaltyParams) -> f64 {
    debug_assert!(a > 0.0 && w >= 0.0);
    let up = w * p.lambda_plus / a;
    let dn = w * p.lambda_minus / a;
    if q > up {
        q - up
    } else if q < -dn {
        q + dn
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn params(lp: f64, lm: f64, eps: f64) -> PenaltyParams {
        PenaltyParams::new(lp, lm, eps).unwrap()
    }

    #[test]
    fn b_value_cases() {
        let p = params(1.0, 5.0, 0.1);
        assert_eq!(b_value(2.0, &p), 2.0);
        assert_eq!(b_value(0.0, &p), 0.0);
        assert_eq!(b_value(-3.0, &p), 15.0);
    }

    #[test]
    fn b_value_closed_form_and_convexity() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = params(1.7, 0.4, 0.2);
        for _ in 0..2000 {
            let s: f64 = rng.random_range(-5.0..5.0);
            let want = p.lambda_plus * s.max(0.0) + p.lambda_minus * (-s).max(0.0);
            assert!((b_value(s, &p) - want).abs() < 1e-15);
            assert!(b_value(s, &p) >= 0.0);
        }
        // midpoint convexity on random triples
        for _ in 0..2000 {
            let a: f64 = rng.random_range(-4.0..4.0);
            let b: f64 = rng.random_range(-4.0..4.0);
            let lhs = b_value(0.5 * (a + b), &p);
            let rhs = 0.5 * (b_value(a, &p) + b_value(b, &p));
            assert!(lhs <= rhs + 1e-14);
        }
    }

    #[test]
    fn beta_eps_edges_and_symmetry() {
        let p = params(2.0, 3.0, 0.25);
        assert_eq!(beta_eps(p.epsilon, &p, BetaShape::Linear), 2.0);
        assert_eq!(beta_eps(-p.epsilon, &p, BetaShape::Linear), -3.0);
        assert_eq!(beta_eps(10.0, &p, BetaShape::Linear), 2.0);
        let sym = params(1.5, 1.5, 0.25);
        assert_eq!(beta_eps(0.0, &sym, BetaShape::Linear), 0.0);
        assert_eq!(beta_eps(0.0, &sym, BetaShape::Cubic), 0.0);
    }

    #[test]
    fn beta_eps_slope_values() {
        let p = params(1.0, 1.0, 0.5);
        assert_eq!(beta_eps_slope(0.0, &p, BetaShape::Linear), 2.0);
        assert_eq!(beta_eps_slope(2.0 * p.epsilon, &p, BetaShape::Linear), 0.0);
        assert_eq!(beta_eps_slope(-2.0 * p.epsilon, &p, BetaShape::Linear), 0.0);
        // kink: interior value
        assert_eq!(beta_eps_slope(p.epsilon, &p, BetaShape::Linear), 2.0);
    }

    #[test]
    fn beta_eps_monotone_and_bounded() {
        let p = params(0.7, 2.3, 0.05);
        for shape in [BetaShape::Linear, BetaShape::Cubic] {
            let mut last = f64::NEG_INFINITY;
            for k in -500..=500 {
                let s = k as f64 * 0.002;
                let b = beta_eps(s, &p, shape);
                assert!(b + 1e-14 >= last, "monotonicity failed at s={s}");
                assert!(b.abs() <= p.lambda() + 1e-14);
                last = b;
            }
        }
    }

    #[test]
    fn beta_eps_converges_to_subdifferential_selection() {
        let p0 = params(1.3, 0.8, 1.0);
        for &s in &[0.31f64, -0.47, 2.0, -3.0] {
            let want = if s > 0.0 { p0.lambda_plus } else { -p0.lambda_minus };
            let mut eps = 1.0;
            let mut err_prev = f64::INFINITY;
            for _ in 0..20 {
                let p = p0.with_epsilon(eps);
                let err = (beta_eps(s, &p, BetaShape::Linear) - want).abs();
                assert!(err <= err_prev + 1e-15);
                err_prev = err;
                eps *= 0.5;
            }
            assert_eq!(err_prev, 0.0);
        }
    }

    /// Independent oracle: bracket by scanning a fine grid, then ternary
    /// search on the strictly convex objective.
    fn prox_oracle(q: f64, a: f64, w: f64, p: &PenaltyParams) -> f64 {
        let obj = |s: f64| 0.5 * a * (s - q) * (s - q) + w * b_value(s, p);
        let span = q.abs() + w * p.lambda() / a + 1.0;
        let n = 10_000;
        let mut best = (obj(-span), -span);
        for k in 0..=n {
            let s = -span + 2.0 * span * k as f64 / n as f64;
            let v = obj(s);
            if v < best.0 {
                best = (v, s);
            }
        }
        let mut lo = best.1 - 2.0 * span / n as f64;
        let mut hi = best.1 + 2.0 * span / n as f64;
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if obj(m1) <= obj(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn prox_examples() {
        let p = params(1.0, 1.0, 0.1);
        let got = prox_b(3.0, 1.0, 1.0, &p);
        assert!((got - prox_oracle(3.0, 1.0, 1.0, &p)).abs() < 1e-10);
        assert_eq!(got, 2.0);
        assert_eq!(prox_b(0.0, 1.0, 1.0, &p), 0.0);
        let dead = prox_b(-0.5, 1.0, 1.0, &p);
        assert!((dead - prox_oracle(-0.5, 1.0, 1.0, &p)).abs() < 1e-10);
        assert_eq!(dead, 0.0);
    }

    #[test]
    fn prox_matches_bruteforce_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let p = params(
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                0.1,
            );
            let q = rng.random_range(-4.0..4.0);
            let a = rng.random_range(0.2..5.0);
            let w = rng.random_range(0.0..3.0);
            let got = prox_b(q, a, w, &p);
            let want = prox_oracle(q, a, w, &p);
            assert!(
                (got - want).abs() < 1e-10,
                "q={q} a={a} w={w}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn prox_nonexpansive_and_identity_at_zero_weight() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let p = params(1.2, 0.6, 0.1);
        for _ in 0..2000 {
            let a = rng.random_range(0.2..5.0);
            let w = rng.random_range(0.0..3.0);
            let q1 = rng.random_range(-4.0..4.0);
            let q2 = rng.random_range(-4.0..4.0);
            let d = (prox_b(q1, a, w, &p) - prox_b(q2, a, w, &p)).abs();
            assert!(d <= (q1 - q2).abs() + 1e-14);
            assert_eq!(prox_b(q1, a, 0.0, &p), q1);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(PenaltyParams::new(0.0, 1.0, 0.1).is_err());
        assert!(PenaltyParams::new(1.0, -1.0, 0.1).is_err());
        assert!(PenaltyParams::new(1.0, 1.0, 0.0).is_err());
        assert!(PenaltyParams::new(1.0, 2.0, 0.1).unwrap().lambda() == 2.0);
    }
}

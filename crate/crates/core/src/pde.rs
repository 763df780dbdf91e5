//! The level-set equation whose long-time solution encodes the region of
//! attraction, and the sigmoid bump used as its initial condition.
//!
//! Time runs forward on `[0, t_max]`:
//!
//! ```text
//! phi_t = min(0, grad(phi) . f(x)),    phi(x, 0) = phi0(x)
//! ```
//!
//! The solution is `phi(x, t) = min over s in [0, t] of phi0(psi_x(s))`, the
//! lowest initial value visited by the trajectory from `x`. States whose
//! trajectory reaches the initial basin `{phi0 <= 0}` end up with a
//! non-positive value; everything else keeps its plateau value. Values only
//! ever decrease.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `phi0(x) = a / (1 + exp(-m (|x - center| - r))) + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidIc {
    pub a: f64,
    pub m: f64,
    pub r: f64,
    pub c: f64,
    pub center: Vec<f64>,
}

impl SigmoidIc {
    /// The constants used by every shipped experiment: zero level at radius
    /// `r`, basin value near -1, plateau near +1.
    pub fn standard(center: Vec<f64>, r: f64) -> Self {
        Self {
            a: 2.0,
            m: 20.0,
            r,
            c: -1.0,
            center,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.r > 0.0) {
            return Err(Error::Config(
                "sigmoid slope and radius must be positive".into(),
            ));
        }
        if self.center.is_empty() {
            return Err(Error::Config("sigmoid center must be non-empty".into()));
        }
        if !(self.value_at_radius(0.0) < 0.0 && self.plateau() > 0.0) {
            return Err(Error::Config(format!(
                "sigmoid must be negative at its center and positive far away \
                 (center value {}, plateau {})",
                self.value_at_radius(0.0),
                self.plateau()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Far-field value `a + c`.
    pub fn plateau(&self) -> f64 {
        self.a + self.c
    }

    pub fn value_at_radius(&self, rho: f64) -> f64 {
        // exp overflows to inf for rho << r, giving a / inf = 0 as wanted.
        self.a / (1.0 + (-self.m * (rho - self.r)).exp()) + self.c
    }

    pub fn radius_of(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.value_at_radius(self.radius_of(x))
    }

    pub fn eval_checked(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.eval(x))
    }

    /// Range `[inf phi0, sup phi0]` over all of space.
    pub fn range(&self) -> (f64, f64) {
        let lo = self.value_at_radius(0.0);
        let hi = self.plateau();
        (lo.min(hi), lo.max(hi))
    }
}

/// `min(0, grad . f)`: the only part of the transport term that acts.
#[inline]
pub fn hamiltonian(grad_phi: &[f64], f_x: &[f64]) -> f64 {
    let dot: f64 = grad_phi.iter().zip(f_x).map(|(g, f)| g * f).sum();
    dot.min(0.0)
}

/// Pointwise defect `phi_t - min(0, grad(phi) . f)`; zero for an exact solution.
#[inline]
pub fn residual(phi_t: f64, grad_phi: &[f64], f_x: &[f64]) -> f64 {
    phi_t - hamiltonian(grad_phi, f_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_examples() {
        let ic = SigmoidIc {
            a: 3.0,
            m: 5.0,
            r: 1.5,
            c: -0.5,
            center: vec![1.0, 2.0],
        };
        assert_abs_diff_eq!(ic.eval(&[2.5, 2.0]), 3.0 / 2.0 - 0.5, epsilon = 1e-15);
        let std = SigmoidIc::standard(vec![0.0, 0.0], 1.0);
        assert_abs_diff_eq!(std.eval(&[0.6, 0.8]), 0.0, epsilon = 1e-15);
        assert_eq!(std.eval(&[1e6, 0.0]), 1.0);
        assert_eq!(std.eval(&[f64::MAX, 0.0]), 1.0);
        assert!(std.eval(&[0.0, 0.0]) < -0.99);
        std.validate().unwrap();
    }

    #[test]
    fn sigmoid_rejects_inverted_shapes() {
        let mut ic = SigmoidIc::standard(vec![0.0], 1.0);
        ic.c = 0.5;
        assert!(ic.validate().is_err());
        ic.c = -3.0;
        assert!(ic.validate().is_err());
        let flat = SigmoidIc {
            m: 0.0,
            ..SigmoidIc::standard(vec![0.0], 1.0)
        };
        assert!(flat.validate().is_err());
        assert!(SigmoidIc::standard(vec![0.0], 1.0)
            .eval_checked(&[0.0, 1.0])
            .is_err());
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual(0.0, &[0.0, 0.0], &[1.0, -1.0]), 0.0);
        // grad . f = 3 > 0: the transport term is inactive.
        assert_eq!(residual(1.0, &[3.0], &[1.0]), 1.0);
        // grad . f = -2 and phi_t = -2 solves the equation exactly.
        assert_eq!(residual(-2.0, &[2.0], &[-1.0]), 0.0);
        assert_eq!(residual(0.0, &[1.0, 1.0], &[-1.0, -1.0]), 2.0);
    }

    #[test]
    fn exact_solution_has_zero_residual_1d() {
        // f = -x, phi0 = x: phi(x, t) = x for x <= 0 and x e^{-t} for x > 0,
        // the smallest value seen along the decaying trajectory.
        let t = 0.7;
        for &x in &[-2.0, -0.5, 0.3, 1.7] {
            let (phi_t, phi_x) = if x > 0.0 {
                (-x * (-t as f64).exp(), (-t as f64).exp())
            } else {
                (0.0, 1.0)
            };
            assert_abs_diff_eq!(residual(phi_t, &[phi_x], &[-x]), 0.0, epsilon = 1e-15);
        }
    }

    proptest! {
        #[test]
        fn residual_is_positively_homogeneous(
            p in -10.0f64..10.0,
            g in proptest::collection::vec(-10.0f64..10.0, 3),
            f in proptest::collection::vec(-10.0f64..10.0, 3),
            lambda in prop_oneof![Just(0.5), Just(2.0), Just(4.0), Just(0.25)],
        ) {
            // Powers of two keep every product exact.
            let scaled: Vec<f64> = g.iter().map(|v| lambda * v).collect();
            prop_assert_eq!(residual(lambda * p, &scaled, &f), lambda * residual(p, &g, &f));
        }

        #[test]
        fn residual_bounds_phi_t(
            p in -10.0f64..10.0,
            g in proptest::collection::vec(-10.0f64..10.0, 2),
            f in proptest::collection::vec(-10.0f64..10.0, 2),
        ) {
            let r = residual(p, &g, &f);
            let dot: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
            prop_assert!(r >= p);
            prop_assert_eq!(r == p, dot >= 0.0);
        }

        #[test]
        fn sigmoid_is_radial_and_monotone(rho1 in 0.0f64..5.0, rho2 in 0.0f64..5.0) {
            let ic = SigmoidIc::standard(vec![0.0, 0.0], 1.0);
            let (lo, hi) = if rho1 < rho2 { (rho1, rho2) } else { (rho2, rho1) };
            prop_assert!(ic.value_at_radius(lo) <= ic.value_at_radius(hi));
            let (rng_lo, rng_hi) = ic.range();
            prop_assert!(ic.value_at_radius(lo) >= rng_lo && ic.value_at_radius(hi) <= rng_hi);
        }
    }
}

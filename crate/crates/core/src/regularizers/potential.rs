//! Convex scalar potentials.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialKind {
    /// Moreau envelope of `|u|`.
    Huber,
    LogCosh,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Potential {
    pub kind: PotentialKind,
    pub beta: f64,
}

impl Potential {
    pub fn new(kind: PotentialKind, beta: f64) -> Self {
        assert!(beta > 0.0, "potential beta must be positive");
        Self { kind, beta }
    }

    /// `(psi(u), psi'(u), psi''(u))`
    pub fn eval(&self, u: f64) -> (f64, f64, f64) {
        (self.value(u), self.d1(u), self.d2(u))
    }

    pub fn value(&self, u: f64) -> f64 {
        let b = self.beta;
        match self.kind {
            PotentialKind::Huber => {
                if u.abs() <= 1.0 / b {
                    0.5 * b * u * u
                } else {
                    u.abs() - 0.5 / b
                }
            }
            // log(cosh(b u)) / b without overflow
            PotentialKind::LogCosh => {
                let a = u.abs();
                a + ((-2.0 * b * a).exp().ln_1p() - std::f64::consts::LN_2) / b
            }
        }
    }

    pub fn d1(&self, u: f64) -> f64 {
        let b = self.beta;
        match self.kind {
            PotentialKind::Huber => (b * u).clamp(-1.0, 1.0),
            PotentialKind::LogCosh => (b * u).tanh(),
        }
    }

    /// Second derivative; the Huber kink at `|u| = 1/beta` takes the inner branch.
    pub fn d2(&self, u: f64) -> f64 {
        let b = self.beta;
        match self.kind {
            PotentialKind::Huber => {
                if u.abs() <= 1.0 / b {
                    b
                } else {
                    0.0
                }
            }
            PotentialKind::LogCosh => {
                let c = (b * u).cosh();
                b / (c * c)
            }
        }
    }

    /// Global bound on `psi''`.
    pub fn curvature_bound(&self) -> f64 {
        self.beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let h = Potential::new(PotentialKind::Huber, 1.0);
        assert_eq!(h.eval(0.0), (0.0, 0.0, 1.0));
        assert_eq!(h.eval(2.0), (1.5, 1.0, 0.0));
        let l = Potential::new(PotentialKind::LogCosh, 1.0);
        assert_eq!(l.eval(0.0), (0.0, 0.0, 1.0));
        let (v, d, _) = l.eval(50.0);
        assert!((v - (50.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((v - 49.3069).abs() < 1e-4);
        assert_eq!(d, 1.0);
        assert!(l.value(1e6).is_finite());
    }

    #[test]
    fn logcosh_matches_direct_formula() {
        let l = Potential::new(PotentialKind::LogCosh, 3.0);
        for u in [-2.0, -0.3, 0.01, 0.7, 4.0] {
            let direct = (3.0f64 * u).cosh().ln() / 3.0;
            assert!((l.value(u) - direct).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn convex_and_monotone(beta in 0.1f64..50.0, u in -5.0f64..5.0, du in 1e-4f64..1.0, huber in any::<bool>()) {
            let kind = if huber { PotentialKind::Huber } else { PotentialKind::LogCosh };
            let p = Potential::new(kind, beta);
            prop_assert!(p.value(u) >= 0.0);
            prop_assert!(p.d1(u + du) >= p.d1(u));
            prop_assert!(p.d2(u) >= 0.0);
            // derivative matches central differences away from the Huber kink
            let h = 1e-6;
            if !huber || ((u.abs() - 1.0 / beta).abs() > 2.0 * h) {
                let fd = (p.value(u + h) - p.value(u - h)) / (2.0 * h);
                prop_assert!((fd - p.d1(u)).abs() < 1e-6 * (1.0 + beta));
            }
        }
    }
}

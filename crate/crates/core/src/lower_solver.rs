//! Accelerated gradient solver for the strongly convex lower-level problem
//! `h(x) = ||A x - y||^2 + R_theta(x) + xi/2 ||x||^2`.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::cost::CostCounter;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::problems::{strong_convexity_floor, ProblemInstance};
use crate::regularizers::{Regularizer, ThetaParams};
use crate::vecops;
use crate::Rng;

/// When a solve is considered finished.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    /// `||grad h|| <= mu * eps`, certifying `||x - x_hat|| <= eps`.
    Certified,
    /// `||grad h|| <= eps`.
    GradTol,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: u64,
    /// Gradient Lipschitz constant; estimated at the starting point when `None`.
    pub lipschitz_estimate: Option<f64>,
    /// Reset momentum when an accelerated step is rejected.
    pub restart: bool,
    /// Accept steps that do not exceed the largest of the last `n` objective
    /// values; 0 means monotone.
    pub nonmonotone_window: usize,
    pub stop: StopRule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 10_000, lipschitz_estimate: None, restart: true, nonmonotone_window: 10, stop: StopRule::Certified }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if let Some(l) = self.lipschitz_estimate {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidArgument(format!("Lipschitz estimate must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowerSolution {
    pub x_tilde: Image,
    pub grad_norm: f64,
    /// `grad_norm / mu`, an upper bound on the distance to the exact minimizer.
    pub certified_distance: f64,
    pub iters: u64,
    pub converged: bool,
    pub objective: f64,
    pub mu: f64,
    /// Final step constant; `None` when no iteration was needed.
    pub lipschitz: Option<f64>,
}

/// The lower-level objective for one task at fixed parameters.
#[derive(Clone, Copy)]
pub struct LowerProblem<'a> {
    pub inst: &'a ProblemInstance,
    pub reg: &'a dyn Regularizer,
    pub theta: &'a ThetaParams,
}

impl<'a> LowerProblem<'a> {
    pub fn new(inst: &'a ProblemInstance, reg: &'a dyn Regularizer, theta: &'a ThetaParams) -> Self {
        Self { inst, reg, theta }
    }

    pub fn value(&self, x: &Image) -> Result<f64> {
        let xi = self.inst.xi();
        Ok(self.inst.fidelity(x)? + self.reg.value(x, self.theta)? + 0.5 * xi * vecops::dot(x.data(), x.data()))
    }

    pub fn grad(&self, x: &Image) -> Result<Image> {
        grad_h(x, self.theta, self.inst, self.reg)
    }

    /// `(2 A^T A + grad^2 R + xi I) v`
    pub fn hvp(&self, x: &Image, v: &Image) -> Result<Image> {
        let ata = self.inst.apply_at(&self.inst.apply_a(v)?)?;
        let mut out = self.reg.hvp_x(x, self.theta, v)?.into_vec();
        vecops::axpy(2.0, ata.data(), &mut out);
        vecops::axpy(self.inst.xi(), v.data(), &mut out);
        v.like(out)
    }

    pub fn mu(&self) -> Result<f64> {
        strong_convexity_floor(self.inst, self.reg, self.theta)
    }

    /// Power iteration on the Hessian at `x` (20 steps) times a 1.1 margin.
    pub fn estimate_lipschitz(&self, x: &Image) -> Result<f64> {
        let mut rng = Rng::seed_from_u64(0x11b5);
        let mut v: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = vecops::norm(&v);
        vecops::scale(1.0 / n, &mut v);
        let mut est = 0.0;
        for _ in 0..20 {
            let hv = self.hvp(x, &x.like(v)?)?;
            est = vecops::norm(hv.data());
            if !(est > 0.0) {
                break;
            }
            v = hv.into_vec();
            vecops::scale(1.0 / est, &mut v);
        }
        Ok((1.1 * est).max(self.mu()?))
    }
}

/// Step `y - g/L`, doubling `L` until the descent-lemma decrease
/// `h(z) <= h(y) - ||g||^2 / (2L)` holds.
fn gradient_step(problem: &LowerProblem<'_>, y: &Image, hy: f64, gy: &Image, lip: &mut f64) -> Result<(Image, f64)> {
    let g2 = vecops::dot(gy.data(), gy.data());
    let slack = 1e-12 * hy.abs().max(1.0);
    loop {
        let mut z = y.data().to_vec();
        vecops::axpy(-1.0 / *lip, gy.data(), &mut z);
        let z = y.like(z)?;
        let hz = problem.value(&z)?;
        if (hz.is_finite() && hz <= hy - 0.5 * g2 / *lip + slack) || *lip > 1e300 {
            return Ok((z, hz));
        }
        *lip *= 2.0;
    }
}

/// `grad h = 2 A^T (A x - y) + grad R(x) + xi x`
pub fn grad_h(x: &Image, theta: &ThetaParams, inst: &ProblemInstance, reg: &dyn Regularizer) -> Result<Image> {
    let ax = inst.apply_a(x)?;
    let resid = ax.like(vecops::sub(ax.data(), inst.y().data()))?;
    let mut g = reg.grad_x(x, theta)?.into_vec();
    vecops::axpy(2.0, inst.apply_at(&resid)?.data(), &mut g);
    vecops::axpy(inst.xi(), x.data(), &mut g);
    x.like(g)
}

/// Nesterov-accelerated gradient descent with step `1/L`, function-value
/// restart and optional nonmonotone acceptance. Every iteration is charged
/// one unit to `cost`, with a minimum of one unit per call. Reaching `max_iters` is not an error: the returned
/// solution reports `converged = false` and the distance actually certified.
pub fn solve(
    problem: LowerProblem<'_>,
    x0: &Image,
    eps: f64,
    cfg: &SolverConfig,
    cost: &CostCounter,
) -> Result<LowerSolution> {
    cfg.validate()?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("target accuracy must be positive, got {eps}")));
    }
    problem.inst.y().ensure_same_shape(x0, "initial iterate")?;
    let mu = problem.mu()?;
    let tol = match cfg.stop {
        StopRule::Certified => mu * eps,
        StopRule::GradTol => eps,
    };
    let mut lip = cfg.lipschitz_estimate;
    let mut x = x0.clone();
    let mut x_prev = x0.clone();
    let mut hx = problem.value(&x)?;
    let mut gx = problem.grad(&x)?;
    let mut t = 1.0f64;
    let mut window: VecDeque<f64> = VecDeque::from([hx]);
    let mut iters = 0u64;
    let mut gn = vecops::norm(gx.data());
    while gn > tol && iters < cfg.max_iters {
        iters += 1;
        let lip = match &mut lip {
            Some(l) => l,
            none => none.insert(problem.estimate_lipschitz(x0)?),
        };
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        let (y, hy, gy) = if beta > 0.0 {
            let mut y = x.data().to_vec();
            vecops::axpy(beta, &vecops::sub(x.data(), x_prev.data()), &mut y);
            let y = x.like(y)?;
            let hy = problem.value(&y)?;
            let gy = problem.grad(&y)?;
            (y, hy, gy)
        } else {
            (x.clone(), hx, gx.clone())
        };
        let (z, hz) = gradient_step(&problem, &y, hy, &gy, lip)?;
        let reference = if cfg.nonmonotone_window > 0 {
            window.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            hx
        };
        if hz <= reference {
            x_prev = std::mem::replace(&mut x, z);
            hx = hz;
            t = t_next;
        } else {
            // the extrapolated point overshot: plain gradient step from x
            let (v, hv) = gradient_step(&problem, &x, hx, &gx, lip)?;
            x_prev = v.clone();
            x = v;
            hx = hv;
            if cfg.restart {
                t = 1.0;
            }
        }
        window.push_back(hx);
        if window.len() > cfg.nonmonotone_window.max(1) {
            window.pop_front();
        }
        gx = problem.grad(&x)?;
        gn = vecops::norm(gx.data());
    }
    // a solve that stops immediately still paid for its certificate
    cost.add(iters.max(1));
    Ok(LowerSolution {
        x_tilde: x,
        grad_norm: gn,
        certified_distance: gn / mu,
        iters,
        converged: gn <= tol,
        objective: hx,
        mu,
        lipschitz: lip,
    })
}

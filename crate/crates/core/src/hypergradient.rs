//! Inexact stochastic hypergradients by implicit differentiation.
//!
//! For each sampled task the lower-level problem is solved to a distance
//! target, the adjoint system `H q = grad g(x)` is solved by CG, and the
//! sample contributes `-J^T q` with `J = grad^2_{x theta} h`. Targets for both
//! solves come from a first-order error model so the returned estimate is
//! within `eps` of the exact stochastic hypergradient under the local
//! constants in use.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::cost::CostCounter;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linear_solver::{cg_solve_from, SpdOperator};
use crate::lower_solver::{solve, LowerProblem, SolverConfig, StopRule};
use crate::problems::{upper_grad, upper_loss, ProblemInstance};
use crate::regularizers::{JacobianConstants, Regularizer, ThetaParams};
use crate::vecops;

/// Local constants of one task used by the error model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetConstants {
    /// Lipschitz constant of `grad g`.
    pub l_g: f64,
    /// Lipschitz constant of the Hessian `H` in `x`.
    pub l_h: f64,
    /// Lipschitz constant of `J` in `x`.
    pub l_j: f64,
    /// Bound on `||J||`.
    pub j_max: f64,
    /// Bound on `||grad g||`.
    pub grad_g_norm: f64,
}

impl BudgetConstants {
    /// Error gain of the lower-level distance.
    pub fn gain_x(&self, mu: f64) -> f64 {
        self.l_j * self.grad_g_norm / mu + self.j_max * (self.l_g / mu + self.l_h * self.grad_g_norm / (mu * mu))
    }

    /// Error gain of the CG residual.
    pub fn gain_cg(&self, mu: f64) -> f64 {
        self.j_max / mu
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorBudget {
    /// Lower-level distance target.
    pub delta_x: f64,
    /// Absolute CG residual target.
    pub delta_cg: f64,
}

/// Splits `eps` evenly: the distance term and the residual term each get
/// `eps / 2` through their gains. A channel with zero gain gets an infinite
/// target.
pub fn error_budget(eps: f64, mu: f64, c: &BudgetConstants) -> Result<ErrorBudget> {
    if !(eps > 0.0) || !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("error budget needs eps > 0 and mu > 0, got {eps}, {mu}")));
    }
    let share = |gain: f64| if gain > 0.0 { 0.5 * eps / gain } else { f64::INFINITY };
    Ok(ErrorBudget { delta_x: share(c.gain_x(mu)), delta_cg: share(c.gain_cg(mu)) })
}

/// Where the error-model constants come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstantsSource {
    /// Exact constants from the regularizer when available, else the fallback.
    Auto { fallback: JacobianConstants },
    /// Always use the given values.
    Fixed(JacobianConstants),
}

impl Default for ConstantsSource {
    fn default() -> Self {
        ConstantsSource::Auto { fallback: JacobianConstants { l_hessian: 0.0, l_jacobian: 0.0, j_max: 1.0 } }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypergradConfig {
    pub solver: SolverConfig,
    pub cg_max_iters: u64,
    pub constants: ConstantsSource,
    /// Replaces the certified strong-convexity floor in the error model when
    /// set; useful when the floor is tiny and the certificate impractical.
    pub practical_mu: Option<f64>,
    /// Largest distance targets, keeping the error model local.
    pub max_delta: f64,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            cg_max_iters: 2_000,
            constants: ConstantsSource::default(),
            practical_mu: None,
            max_delta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleCost {
    pub index: usize,
    pub lower_iters: u64,
    pub cg_iters: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergradResult {
    pub z: Vec<f64>,
    pub error_bound: f64,
    pub lower_iters: u64,
    pub cg_iters: u64,
    pub per_sample_costs: Vec<SampleCost>,
    /// Weighted upper loss `(1/m) sum v_i g_i(x_i)` at the computed solutions.
    pub batch_loss: f64,
    /// True when some solve stopped at its iteration cap.
    pub inexact_solves: bool,
}

impl HypergradResult {
    pub fn total_cost(&self) -> u64 {
        self.lower_iters + self.cg_iters
    }
}

#[derive(Clone, Debug)]
struct WarmEntry {
    x: Image,
    q: Image,
}

/// Previous lower-level solutions and adjoints keyed by task index.
#[derive(Clone, Debug)]
pub struct WarmStore {
    entries: HashMap<usize, WarmEntry>,
    theta_last: Option<Vec<f64>>,
    /// The store is emptied when theta moves farther than this between calls.
    pub reset_threshold: f64,
}

impl Default for WarmStore {
    fn default() -> Self {
        Self::new(f64::INFINITY)
    }
}

impl WarmStore {
    pub fn new(reset_threshold: f64) -> Self {
        Self { entries: HashMap::new(), theta_last: None, reset_threshold }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.theta_last = None;
    }

    fn observe(&mut self, theta: &[f64]) {
        if let Some(prev) = &self.theta_last {
            if prev.len() != theta.len() || vecops::dist(prev, theta) > self.reset_threshold {
                self.entries.clear();
            }
        }
        self.theta_last = Some(theta.to_vec());
    }
}

/// `grad_theta <grad_x h(x, theta), q>`; only the regularizer depends on theta.
pub fn mixed_jvp(x: &Image, theta: &ThetaParams, q: &Image, reg: &dyn Regularizer) -> Result<Vec<f64>> {
    reg.mixed_jvp(x, theta, q)
}

fn constants_at(
    source: &ConstantsSource,
    reg: &dyn Regularizer,
    theta: &ThetaParams,
    inst: &ProblemInstance,
    x_ref: &Image,
    radius: f64,
) -> BudgetConstants {
    let jc = match *source {
        ConstantsSource::Fixed(c) => c,
        ConstantsSource::Auto { fallback } => reg.jacobian_constants(x_ref, radius, theta).unwrap_or(fallback),
    };
    let to_target = vecops::dist(x_ref.data(), inst.x_star().data());
    BudgetConstants {
        l_g: 2.0,
        l_h: jc.l_hessian,
        l_j: jc.l_jacobian,
        j_max: jc.j_max,
        grad_g_norm: 2.0 * (to_target + radius),
    }
}

struct SampleOut {
    index: usize,
    contribution: Vec<f64>,
    bound: f64,
    loss: f64,
    lower_iters: u64,
    cg_iters: u64,
    exact: bool,
    warm: WarmEntry,
}

#[allow(clippy::too_many_arguments)]
fn one_sample(
    index: usize,
    inst: &ProblemInstance,
    reg: &dyn Regularizer,
    theta: &ThetaParams,
    eps: f64,
    cfg: &HypergradConfig,
    warm: Option<&WarmEntry>,
) -> Result<SampleOut> {
    let problem = LowerProblem::new(inst, reg, theta);
    let mu_cert = problem.mu()?;
    let mu = cfg.practical_mu.unwrap_or(mu_cert);
    let x0 = warm.map_or_else(|| inst.y().clone(), |w| w.x.clone());
    let g0 = vecops::norm(problem.grad(&x0)?.data());
    // x_hat lies within rho of x0; x_tilde and the final check ball stay
    // inside the wider ball used for a-priori constants.
    let rho = g0 / mu;
    let wide = constants_at(&cfg.constants, reg, theta, inst, &x0, rho + 2.0 * cfg.max_delta);
    let budget = error_budget(eps, mu, &wide)?;
    let delta_x = budget.delta_x.min(cfg.max_delta);
    let target = match cfg.solver.stop {
        StopRule::Certified => delta_x * mu / mu_cert,
        StopRule::GradTol => delta_x * mu,
    };
    let lower_cost = CostCounter::new();
    let sol = solve(problem, &x0, target, &cfg.solver, &lower_cost)?;
    let x = sol.x_tilde;
    let d = sol.grad_norm / mu;
    let gg = upper_grad(&x, inst)?;
    let tol = budget.delta_cg.min(cfg.max_delta).max(f64::MIN_POSITIVE);
    let cg = {
        let op = SpdOperator::new(x.len(), |v| Ok(problem.hvp(&x, &x.like(v.to_vec())?)?.into_vec()));
        let q0 = warm.map(|w| w.q.data());
        cg_solve_from(&op, gg.data(), q0, tol, cfg.cg_max_iters, &CostCounter::new())?
    };
    let q = x.like(cg.q)?;
    let mut contribution = mixed_jvp(&x, theta, &q, reg)?;
    vecops::scale(-1.0, &mut contribution);
    let post = constants_at(&cfg.constants, reg, theta, inst, &x, d);
    let bound = post.gain_x(mu) * d + post.gain_cg(mu) * cg.residual;
    Ok(SampleOut {
        index,
        contribution,
        bound,
        loss: upper_loss(&x, inst)?,
        lower_iters: lower_cost.get(),
        cg_iters: cg.iters,
        exact: sol.converged && cg.converged,
        warm: WarmEntry { x, q },
    })
}

/// `z = (1/m) sum_i v_i (-J_i^T q_i)` over tasks with `v_i > 0`; tasks with
/// zero weight cost nothing. Per-task work runs in parallel and is reduced
/// in index order, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn inexact_hypergradient(
    instances: &[ProblemInstance],
    weights: &[f64],
    reg: &dyn Regularizer,
    theta: &ThetaParams,
    eps: f64,
    cfg: &HypergradConfig,
    mut warm: Option<&mut WarmStore>,
    cost: &CostCounter,
) -> Result<HypergradResult> {
    if weights.len() != instances.len() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} tasks", weights.len(), instances.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("sampling weights must be finite and non-negative".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("hypergradient accuracy must be positive, got {eps}")));
    }
    theta.ensure_layout(&reg.layout())?;
    let m = instances.len() as f64;
    let total_weight: f64 = weights.iter().sum();
    // per-task targets such that the weighted average error stays below eps
    let eps_task = if total_weight > 0.0 { eps * m / total_weight } else { eps };
    if let Some(store) = warm.as_deref_mut() {
        store.observe(theta.flat());
    }
    let active: Vec<usize> = (0..instances.len()).filter(|&i| weights[i] > 0.0).collect();
    let store_ref = warm.as_deref();
    let outs: Vec<Result<SampleOut>> = active
        .par_iter()
        .map(|&i| {
            let w = store_ref.and_then(|s| s.entries.get(&i));
            one_sample(i, &instances[i], reg, theta, eps_task, cfg, w)
        })
        .collect();
    let mut z = vec![0.0; theta.len()];
    let mut bound = 0.0;
    let mut loss = 0.0;
    let mut result = HypergradResult {
        z: Vec::new(),
        error_bound: 0.0,
        lower_iters: 0,
        cg_iters: 0,
        per_sample_costs: Vec::with_capacity(active.len()),
        batch_loss: 0.0,
        inexact_solves: false,
    };
    let mut first_err = None;
    for out in outs {
        match out {
            Ok(o) => {
                let w = weights[o.index];
                vecops::axpy(w / m, &o.contribution, &mut z);
                bound += w / m * o.bound;
                loss += w / m * o.loss;
                result.lower_iters += o.lower_iters;
                result.cg_iters += o.cg_iters;
                result.inexact_solves |= !o.exact;
                result.per_sample_costs.push(SampleCost { index: o.index, lower_iters: o.lower_iters, cg_iters: o.cg_iters });
                if let Some(store) = warm.as_deref_mut() {
                    store.entries.insert(o.index, o.warm);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    cost.add(result.total_cost());
    if let Some(e) = first_err {
        return Err(e);
    }
    result.z = z;
    result.error_bound = bound;
    result.batch_loss = loss;
    Ok(result)
}

/// Weighted upper objective `(1/m) sum v_i g_i(x_hat_i(theta))` with lower
/// solves at near machine accuracy.
pub fn upper_objective(
    instances: &[ProblemInstance],
    weights: &[f64],
    reg: &dyn Regularizer,
    theta: &ThetaParams,
) -> Result<f64> {
    let cfg = SolverConfig { max_iters: 200_000, stop: StopRule::GradTol, ..SolverConfig::default() };
    let m = instances.len() as f64;
    let parts: Vec<Result<f64>> = instances
        .par_iter()
        .zip(weights)
        .map(|(inst, &w)| {
            if w == 0.0 {
                return Ok(0.0);
            }
            let sol = solve(LowerProblem::new(inst, reg, theta), inst.y(), 1e-12, &cfg, &CostCounter::new())?;
            Ok(w / m * upper_loss(&sol.x_tilde, inst)?)
        })
        .collect();
    parts.into_iter().sum()
}

/// Central differences of [`upper_objective`]: component-wise when
/// `directions` is `None`, otherwise one directional derivative per direction.
pub fn fd_hypergradient_oracle(
    instances: &[ProblemInstance],
    weights: &[f64],
    reg: &dyn Regularizer,
    theta: &ThetaParams,
    fd_step: f64,
    directions: Option<&[Vec<f64>]>,
) -> Result<Vec<f64>> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {fd_step}")));
    }
    let unit = |i: usize| {
        let mut e = vec![0.0; theta.len()];
        e[i] = 1.0;
        e
    };
    let dirs: Vec<Vec<f64>> = match directions {
        Some(d) => d.to_vec(),
        None => (0..theta.len()).map(unit).collect(),
    };
    dirs.iter()
        .map(|d| {
            if d.len() != theta.len() {
                return Err(Error::ShapeMismatch("direction length differs from theta".into()));
            }
            let mut p = theta.flat().to_vec();
            let mut n = theta.flat().to_vec();
            vecops::axpy(fd_step, d, &mut p);
            vecops::axpy(-fd_step, d, &mut n);
            let fp = upper_objective(instances, weights, reg, &theta.with_flat(p)?)?;
            let fm = upper_objective(instances, weights, reg, &theta.with_flat(n)?)?;
            Ok((fp - fm) / (2.0 * fd_step))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use crate::regularizers::{QuadToy, ZeroRegularizer};

    fn toy_instance() -> ProblemInstance {
        let shape = Shape::new(1, 1, 1);
        ProblemInstance::denoising(Image::from_vec(shape, vec![1.0]).unwrap(), Image::zeros(shape)).unwrap()
    }

    #[test]
    fn budget_split_rule() {
        let c = BudgetConstants { l_g: 1.0, l_h: 1.0, l_j: 1.0, j_max: 1.0, grad_g_norm: 1.0 };
        let b = error_budget(1e-2, 2.0, &c).unwrap();
        assert!((b.delta_cg - 5e-3 * 2.0 / 1.0).abs() < 1e-15);
        assert!((b.delta_x - 5e-3 / c.gain_x(2.0)).abs() < 1e-15);
        let half = error_budget(5e-3, 2.0, &c).unwrap();
        assert!((half.delta_x - 0.5 * b.delta_x).abs() < 1e-18);
        assert!((half.delta_cg - 0.5 * b.delta_cg).abs() < 1e-18);
        assert!(error_budget(0.0, 1.0, &c).is_err());
        assert!(error_budget(1.0, -1.0, &c).is_err());
    }

    #[test]
    fn toy_matches_closed_form() {
        let inst = [toy_instance()];
        let toy = QuadToy::new(0.0);
        let theta = ThetaParams::new(toy.layout(), vec![0.0]).unwrap();
        let cost = CostCounter::new();
        let r = inexact_hypergradient(&inst, &[1.0], &toy, &theta, 1e-8, &HypergradConfig::default(), None, &cost).unwrap();
        assert!((r.z[0] + 0.25).abs() <= 1e-6, "z = {}", r.z[0]);
        assert_eq!(cost.get(), r.total_cost());
    }

    #[test]
    fn zero_weights_cost_nothing() {
        let inst = [toy_instance(), toy_instance()];
        let toy = QuadToy::new(0.0);
        let theta = ThetaParams::new(toy.layout(), vec![0.3]).unwrap();
        let cost = CostCounter::new();
        let r = inexact_hypergradient(&inst, &[0.0, 0.0], &toy, &theta, 1e-3, &HypergradConfig::default(), None, &cost).unwrap();
        assert_eq!(r.z, vec![0.0]);
        assert_eq!(cost.get(), 0);
        assert!(r.per_sample_costs.is_empty());
    }

    #[test]
    fn parameter_free_regularizer_gives_empty_gradient() {
        let inst = [toy_instance()];
        let theta = ThetaParams::zeros(Default::default());
        let r = inexact_hypergradient(&inst, &[1.0], &ZeroRegularizer, &theta, 1e-3, &HypergradConfig::default(), None, &CostCounter::new()).unwrap();
        assert!(r.z.is_empty());
    }

    #[test]
    fn fd_oracle_on_toy() {
        let inst = [toy_instance()];
        let toy = QuadToy::new(0.0);
        let theta = ThetaParams::new(toy.layout(), vec![0.0]).unwrap();
        let g = fd_hypergradient_oracle(&inst, &[1.0], &toy, &theta, 1e-4, None).unwrap();
        assert!((g[0] + 0.25).abs() < 1e-5);
        let d = fd_hypergradient_oracle(&inst, &[1.0], &toy, &theta, 1e-4, Some(&[vec![2.0]])).unwrap();
        assert!((d[0] - 2.0 * g[0]).abs() < 1e-8);
        // x_hat equal to the target: no upper-level gradient
        let shape = Shape::new(1, 1, 1);
        let at_target = [ProblemInstance::denoising(Image::from_vec(shape, vec![1.0]).unwrap(), Image::from_vec(shape, vec![0.5]).unwrap()).unwrap()];
        let g = fd_hypergradient_oracle(&at_target, &[1.0], &toy, &theta, 1e-4, None).unwrap();
        assert!(g[0].abs() < 1e-9);
    }

    #[test]
    fn warm_store_resets_on_jumps() {
        let inst = [toy_instance()];
        let toy = QuadToy::new(0.0);
        let cfg = HypergradConfig::default();
        let mut store = WarmStore::new(0.5);
        let t0 = ThetaParams::new(toy.layout(), vec![0.0]).unwrap();
        inexact_hypergradient(&inst, &[1.0], &toy, &t0, 1e-4, &cfg, Some(&mut store), &CostCounter::new()).unwrap();
        assert_eq!(store.len(), 1);
        store.observe(&[0.1]);
        assert_eq!(store.len(), 1);
        store.observe(&[2.0]);
        assert!(store.is_empty());
    }
}

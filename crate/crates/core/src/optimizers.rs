//! Upper-level loops: inexact SGD and Adam driven by inexact hypergradients,
//! with accuracy/step schedules, a cost budget and run logs.

use std::io::Write;

use rand::SeedableRng;
use rayon::prelude::*;

use crate::cost::CostCounter;
use crate::error::{Error, Result};
use crate::hypergradient::{inexact_hypergradient, HypergradConfig, WarmStore};
use crate::lower_solver::{solve, LowerProblem, SolverConfig, StopRule};
use crate::problems::{psnr, sample_v, upper_loss, ProblemInstance, SamplingMode};
use crate::rate_harness::gradient_proxy;
use crate::regularizers::{Regularizer, ThetaParams};
use crate::schedules::Schedule;
use crate::vecops;
use crate::Rng;

pub const RUNLOG_HEADER: &str = "k,cum_cost,epsilon_k,alpha_k,batch_loss,grad_proxy,test_psnr";

/// Budget fractions at which parameter snapshots are kept.
pub const CHECKPOINT_FRACTIONS: [f64; 4] = [0.05, 0.10, 0.50, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Isgd,
    IAdam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps_hat: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub mode: SamplingMode,
    /// Subset size for [`SamplingMode::MinibatchScaled`].
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub step: Schedule,
    pub acc: Schedule,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub batch: BatchSpec,
    pub budget: u64,
    pub log_every: u64,
    /// Gradient proxy cadence in outer iterations; `None` disables it.
    pub proxy_every: Option<u64>,
    pub proxy_eps: f64,
    /// Test PSNR cadence in outer iterations; `None` evaluates only at the end.
    pub test_every: Option<u64>,
    /// Gradient-norm tolerance of the test reconstructions.
    pub test_tol: f64,
    pub max_iters: Option<u64>,
    pub seed: u64,
    pub hypergrad: HypergradConfig,
    pub warm_start: bool,
    pub warm_reset: f64,
}

impl RunConfig {
    pub fn new(step: Schedule, acc: Schedule, budget: u64) -> Self {
        Self {
            step,
            acc,
            optimizer: OptimizerKind::Isgd,
            adam: AdamParams::default(),
            batch: BatchSpec { mode: SamplingMode::MinibatchScaled, size: 8 },
            budget,
            log_every: 1,
            proxy_every: None,
            proxy_eps: 1e-8,
            test_every: None,
            test_tol: 1e-5,
            max_iters: None,
            seed: 0,
            hypergrad: HypergradConfig::default(),
            warm_start: true,
            warm_reset: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be positive".into()));
        }
        if !(self.step.value(0) > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if !(self.acc.value(0) > 0.0) {
            return Err(Error::InvalidArgument("accuracy must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps_hat > 0.0) {
            return Err(Error::InvalidArgument("Adam needs 0 <= beta1, beta2 < 1 and eps_hat > 0".into()));
        }
        if self.log_every == 0 || self.proxy_every == Some(0) || self.test_every == Some(0) {
            return Err(Error::InvalidArgument("logging cadences must be positive".into()));
        }
        if self.batch.mode == SamplingMode::MinibatchScaled && self.batch.size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.proxy_eps > 0.0) || !(self.test_tol > 0.0) {
            return Err(Error::InvalidArgument("proxy and test tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// `theta <- theta - alpha z`
pub fn isgd_step(theta: &mut [f64], z: &[f64], alpha: f64) -> Result<()> {
    if theta.len() != z.len() {
        return Err(Error::ShapeMismatch(format!("step of length {} for {} parameters", z.len(), theta.len())));
    }
    if !vecops::all_finite(z) {
        return Err(Error::InvalidArgument("non-finite hypergradient".into()));
    }
    vecops::axpy(-alpha, z, theta);
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update with gradient `z`.
pub fn iadam_step(state: &mut AdamState, theta: &mut [f64], z: &[f64], alpha: f64, p: &AdamParams) -> Result<()> {
    if theta.len() != z.len() || state.m.len() != z.len() || state.v.len() != z.len() {
        return Err(Error::ShapeMismatch("Adam state, parameters and gradient differ in length".into()));
    }
    if !vecops::all_finite(z) {
        return Err(Error::InvalidArgument("non-finite hypergradient".into()));
    }
    state.t += 1;
    let c1 = 1.0 - p.beta1.powf(state.t as f64);
    let c2 = 1.0 - p.beta2.powf(state.t as f64);
    for i in 0..z.len() {
        state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * z[i];
        state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * z[i] * z[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= alpha * m_hat / (v_hat.sqrt() + p.eps_hat);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub k: u64,
    pub cum_cost: u64,
    pub epsilon_k: f64,
    pub alpha_k: f64,
    pub batch_loss: f64,
    pub grad_proxy: Option<f64>,
    pub test_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Running,
    BudgetExhausted,
    MaxIters,
    Aborted(String),
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunStatus::Running => write!(f, "running"),
            RunStatus::BudgetExhausted => write!(f, "budget_exhausted"),
            RunStatus::MaxIters => write!(f, "max_iters"),
            RunStatus::Aborted(why) => write!(f, "aborted: {why}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub status: RunStatus,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl RunLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{RUNLOG_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.k,
                r.cum_cost,
                r.epsilon_k,
                r.alpha_k,
                r.batch_loss,
                opt(r.grad_proxy),
                opt(r.test_psnr)
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<LogRow>> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != RUNLOG_HEADER {
            return Err(Error::Format(format!("unexpected run log header `{}`", header.join(","))));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}`"))) };
        let maybe = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        rd.records()
            .map(|rec| {
                let rec = rec?;
                Ok(LogRow {
                    k: rec[0].parse().map_err(|_| Error::Format("bad k".into()))?,
                    cum_cost: rec[1].parse().map_err(|_| Error::Format("bad cum_cost".into()))?,
                    epsilon_k: num(&rec[2])?,
                    alpha_k: num(&rec[3])?,
                    batch_loss: num(&rec[4])?,
                    grad_proxy: maybe(&rec[5])?,
                    test_psnr: maybe(&rec[6])?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fraction: f64,
    pub k: u64,
    pub cum_cost: u64,
    pub theta: ThetaParams,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: RunLog,
    pub theta: ThetaParams,
    pub checkpoints: Vec<Checkpoint>,
    /// Outer iterations completed.
    pub iterations: u64,
    pub cum_cost: u64,
    /// Cost spent on gradient proxies, outside the training budget.
    pub proxy_cost: u64,
}

/// Mean PSNR of lower-level reconstructions on the test tasks.
pub fn test_psnr(test: &[ProblemInstance], reg: &dyn Regularizer, theta: &ThetaParams, tol: f64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("no test tasks".into()));
    }
    let cfg = SolverConfig { stop: StopRule::GradTol, max_iters: 20_000, ..SolverConfig::default() };
    let mut total = 0.0;
    for inst in test {
        let sol = solve(LowerProblem::new(inst, reg, theta), inst.y(), tol, &cfg, &CostCounter::new())?;
        total += psnr(&sol.x_tilde, inst.x_star(), 1.0)?;
    }
    Ok(total / test.len() as f64)
}

/// Mean upper loss `(1/m) sum g_i(x_i)` over all tasks, with the lower
/// problems solved to gradient norm `tol`.
pub fn training_loss(train: &[ProblemInstance], reg: &dyn Regularizer, theta: &ThetaParams, tol: f64) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training tasks".into()));
    }
    let cfg = SolverConfig { stop: StopRule::GradTol, max_iters: 20_000, ..SolverConfig::default() };
    let losses: Vec<Result<f64>> = train
        .par_iter()
        .map(|inst| {
            let sol = solve(LowerProblem::new(inst, reg, theta), inst.y(), tol, &cfg, &CostCounter::new())?;
            upper_loss(&sol.x_tilde, inst)
        })
        .collect();
    Ok(losses.into_iter().sum::<Result<f64>>()? / train.len() as f64)
}

/// Runs the upper-level loop until the next hypergradient evaluation would
/// exceed the budget (that evaluation is discarded) or `max_iters` is hit.
/// The partial log is returned for runtime failures; configuration errors
/// are reported as `Err`.
pub fn run(
    train: &[ProblemInstance],
    test: &[ProblemInstance],
    reg: &dyn Regularizer,
    theta0: ThetaParams,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training tasks".into()));
    }
    theta0.ensure_layout(&reg.layout())?;
    let shape = train[0].shape();
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut theta = theta0;
    let mut adam = AdamState::new(theta.len());
    let mut warm = WarmStore::new(cfg.warm_reset);
    let proxy_cost = CostCounter::new();
    let mut out = RunOutput {
        log: RunLog { rows: Vec::new(), status: RunStatus::Running },
        theta: theta.clone(),
        checkpoints: Vec::new(),
        iterations: 0,
        cum_cost: 0,
        proxy_cost: 0,
    };
    let mut next_checkpoint = 0usize;
    let m = train.len();
    let mut k = 0u64;
    let status = loop {
        if cfg.max_iters.is_some_and(|cap| k >= cap) {
            break RunStatus::MaxIters;
        }
        let eps = cfg.acc.value(k);
        let alpha = cfg.step.value(k);
        let proxy = match cfg.proxy_every {
            Some(every) if k % every == 0 => {
                match gradient_proxy(train, reg, &theta, cfg.proxy_eps, &cfg.hypergrad, &proxy_cost) {
                    Ok(p) => Some(p),
                    Err(e) => break RunStatus::Aborted(e.to_string()),
                }
            }
            _ => None,
        };
        let v = match sample_v(m, cfg.batch.mode, cfg.batch.size.min(m), &mut rng) {
            Ok(v) => v,
            Err(e) => break RunStatus::Aborted(e.to_string()),
        };
        let step_cost = CostCounter::new();
        let warm_ref = if cfg.warm_start { Some(&mut warm) } else { None };
        let hg = match inexact_hypergradient(train, &v.weights, reg, &theta, eps, &cfg.hypergrad, warm_ref, &step_cost) {
            Ok(h) => h,
            Err(e) => break RunStatus::Aborted(e.to_string()),
        };
        if out.cum_cost + step_cost.get() > cfg.budget {
            break RunStatus::BudgetExhausted;
        }
        if !vecops::all_finite(&hg.z) {
            break RunStatus::Aborted(Error::NonFinite(k as usize).to_string());
        }
        let before = out.cum_cost;
        out.cum_cost += step_cost.get();
        let stepped = match cfg.optimizer {
            OptimizerKind::Isgd => isgd_step(theta.flat_mut(), &hg.z, alpha),
            OptimizerKind::IAdam => iadam_step(&mut adam, theta.flat_mut(), &hg.z, alpha, &cfg.adam),
        };
        if let Err(e) = stepped.and_then(|_| reg.project(&mut theta, shape)) {
            break RunStatus::Aborted(e.to_string());
        }
        let psnr_now = match cfg.test_every {
            Some(every) if !test.is_empty() && k % every == 0 => match test_psnr(test, reg, &theta, cfg.test_tol) {
                Ok(p) => Some(p),
                Err(e) => break RunStatus::Aborted(e.to_string()),
            },
            _ => None,
        };
        while next_checkpoint < CHECKPOINT_FRACTIONS.len()
            && out.cum_cost as f64 >= CHECKPOINT_FRACTIONS[next_checkpoint] * cfg.budget as f64
        {
            out.checkpoints.push(Checkpoint {
                fraction: CHECKPOINT_FRACTIONS[next_checkpoint],
                k,
                cum_cost: out.cum_cost,
                theta: theta.clone(),
            });
            next_checkpoint += 1;
        }
        let logged = out.log.rows.last().map_or(0, |r| r.cum_cost);
        if (k % cfg.log_every == 0 || proxy.is_some() || psnr_now.is_some()) && out.cum_cost > before && out.cum_cost > logged {
            out.log.rows.push(LogRow {
                k,
                cum_cost: out.cum_cost,
                epsilon_k: eps,
                alpha_k: alpha,
                batch_loss: hg.batch_loss,
                grad_proxy: proxy,
                test_psnr: psnr_now,
            });
        }
        k += 1;
        out.iterations = k;
    };
    if !test.is_empty() && !matches!(status, RunStatus::Aborted(_)) {
        if let Ok(p) = test_psnr(test, reg, &theta, cfg.test_tol) {
            if let Some(last) = out.log.rows.last_mut() {
                last.test_psnr = Some(p);
            }
        }
    }
    out.log.status = status;
    out.theta = theta;
    out.proxy_cost = proxy_cost.get();
    Ok(out)
}

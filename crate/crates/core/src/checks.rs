//! Oracle self-checks: closed-form hypergradients, finite differences,
//! CG against a direct solve and the `L_K` regime table.

use rand::{Rng as _, SeedableRng};
use std::fmt;

use crate::hypergradient::{inexact_hypergradient, HypergradConfig};
use crate::linear_solver::{cg_solve, SpdOperator};
use crate::lower_solver::LowerProblem;
use crate::problems::{make_toy_family, ProblemInstance};
use crate::regularizers::{Crr, Icnn, Potential, PotentialKind, QuadToy, Regularizer};
use crate::schedules::{l_k_series, Schedule};
use crate::{vecops, CostCounter, Error, Image, Result, Rng, Shape, ThetaParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckLevel {
    Fast,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { name: name.into(), tolerance, measured, passed: measured <= tolerance }
    }

    fn errored(name: impl Into<String>) -> Self {
        Self { name: name.into(), tolerance: f64::NAN, measured: f64::NAN, passed: false }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<50} measured {:.3e}  tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

/// Runs the whole suite. Checks that error out are reported as failures.
pub fn run_checks(level: CheckLevel) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<Vec<CheckResult>>| match r {
        Ok(v) => out.extend(v),
        Err(e) => {
            let mut c = CheckResult::errored(name);
            c.name = format!("{name} ({e})");
            out.push(c);
        }
    };
    push("toy hypergradient", toy_hypergradient_checks());
    let (side, points) = match level {
        CheckLevel::Fast => (8, 3),
        CheckLevel::Full => (16, 10),
    };
    let shape = Shape::gray(side, side);
    for (name, reg) in fd_regularizers() {
        push(name, fd_checks(reg.as_ref(), name, shape, points, 7));
    }
    push("cg vs direct", cg_direct_check(6, 11).map(|c| vec![c]));
    push(
        "L_K regime table",
        lk_regime_table().map(|rows| rows.iter().map(RegimeRow::to_check).collect()),
    );
    out
}

/// Regularizers covered by the finite-difference checks.
pub fn fd_regularizers() -> Vec<(&'static str, Box<dyn Regularizer>)> {
    vec![
        ("crr-huber", Box::new(Crr::desk_default(Potential::new(PotentialKind::Huber, 10.0)))),
        ("crr-logcosh", Box::new(Crr::desk_default(Potential::new(PotentialKind::LogCosh, 10.0)))),
        ("icnn", Box::new(Icnn::new(1, 4, 4, 3))),
    ]
}

/// Exact `grad f` of the toy family: `x_hat_i = y_i / (1 + e^s)` and
/// `f = (1/m) sum v_i ||x_hat_i - x*_i||^2`.
pub fn toy_closed_form_gradient(instances: &[ProblemInstance], weights: &[f64], s: f64) -> f64 {
    let m = instances.len() as f64;
    let shrink = 1.0 / (1.0 + s.exp());
    let dx = -s.exp() * shrink * shrink;
    instances
        .iter()
        .zip(weights)
        .map(|(inst, &w)| {
            let g: f64 = inst
                .y()
                .data()
                .iter()
                .zip(inst.x_star().data())
                .map(|(y, t)| 2.0 * (shrink * y - t) * dx * y)
                .sum();
            w * g / m
        })
        .sum()
}

/// Toy hypergradient at tight accuracy against the closed form, and
/// measured error against the target at loose accuracies.
pub fn toy_hypergradient_checks() -> Result<Vec<CheckResult>> {
    let toy = QuadToy::new(0.0);
    let cfg = HypergradConfig::default();
    let mut out = Vec::new();

    let single = ProblemInstance::denoising(
        Image::from_vec(Shape::new(1, 1, 1), vec![1.0])?,
        Image::from_vec(Shape::new(1, 1, 1), vec![0.0])?,
    )?;
    let theta = ThetaParams::new(toy.layout(), vec![0.0])?;
    let z = inexact_hypergradient(&[single], &[1.0], &toy, &theta, 1e-8, &cfg, None, &CostCounter::new())?.z[0];
    out.push(CheckResult::at_most("toy hypergradient s=0 (exact -0.25)", (z + 0.25).abs(), 1e-6));

    let mut rng = Rng::seed_from_u64(3);
    let family = make_toy_family(10, 4, &mut rng)?;
    let weights: Vec<f64> = (0..family.len()).map(|i| (i % 3) as f64).collect();
    for eps in [1e-8, 1e-1, 1e-2, 1e-3] {
        let mut worst = 0.0f64;
        for s in [-1.0, 0.0, 0.7] {
            let theta = ThetaParams::new(toy.layout(), vec![s])?;
            let z = inexact_hypergradient(&family, &weights, &toy, &theta, eps, &cfg, None, &CostCounter::new())?.z[0];
            worst = worst.max((z - toy_closed_form_gradient(&family, &weights, s)).abs());
        }
        let tol = if eps < 1e-6 { 1e-6 } else { eps };
        out.push(CheckResult::at_most(format!("toy family hypergradient eps={eps:.0e}"), worst, tol));
    }
    Ok(out)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Best relative error of a central difference over a few step sizes, so a
/// branch point of a piecewise-smooth function inside the stencil of one
/// step does not decide the outcome.
pub fn central_difference_error(f: impl Fn(f64) -> Result<f64>, exact: f64) -> Result<f64> {
    let mut best = f64::INFINITY;
    for h in [1e-5, 1e-6, 1e-7, 3e-8] {
        let fd = (f(h)? - f(-h)?) / (2.0 * h);
        best = best.min(rel(fd, exact));
    }
    Ok(best)
}

fn random_image(shape: Shape, rng: &mut Rng) -> Result<Image> {
    Image::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Per-entry view of a regularizer's per-tensor non-negativity mask.
pub fn entry_mask(reg: &dyn Regularizer) -> Vec<bool> {
    let layout = reg.layout();
    let tensors = reg.nonneg_mask();
    let mut out = vec![false; layout.len()];
    for (i, &on) in tensors.iter().enumerate() {
        if on {
            out[layout.range(i)].iter_mut().for_each(|v| *v = true);
        }
    }
    out
}

/// Random parameter point: initialisation with every unconstrained scalar
/// nudged, non-negative entries kept non-negative.
pub fn random_theta(reg: &dyn Regularizer, shape: Shape, rng: &mut Rng) -> Result<ThetaParams> {
    let mut theta = reg.init_params(shape, rng)?;
    let mask = entry_mask(reg);
    for (i, v) in theta.flat_mut().iter_mut().enumerate() {
        let bump = rng.random_range(-0.1..0.1);
        *v = if mask.get(i).copied().unwrap_or(false) { (*v + bump).abs() } else { *v + bump };
    }
    reg.project(&mut theta, shape)?;
    Ok(theta)
}

/// Directional central differences of `grad_x`, `hvp_x` and `mixed_jvp` at
/// `points` random `(x, theta)`. Each result reports the worst relative error.
pub fn fd_checks(
    reg: &dyn Regularizer,
    name: &str,
    shape: Shape,
    points: usize,
    seed: u64,
) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mask = entry_mask(reg);
    let (mut grad_err, mut hvp_err, mut jvp_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..points {
        let theta = random_theta(reg, shape, &mut rng)?;
        let x = Image::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let d = random_image(shape, &mut rng)?;
        let w = random_image(shape, &mut rng)?;
        let shifted = |h: f64| -> Result<Image> {
            let mut xs = x.clone();
            vecops::axpy(h, d.data(), xs.data_mut());
            Ok(xs)
        };

        let g = reg.grad_x(&x, &theta)?;
        let e = central_difference_error(|h| reg.value(&shifted(h)?, &theta), vecops::dot(g.data(), d.data()))?;
        grad_err = grad_err.max(e);

        let hd = reg.hvp_x(&x, &theta, &d)?;
        let e = central_difference_error(
            |h| Ok(vecops::dot(reg.grad_x(&shifted(h)?, &theta)?.data(), w.data())),
            vecops::dot(hd.data(), w.data()),
        )?;
        hvp_err = hvp_err.max(e);

        // constrained entries only move where they stay feasible
        let dir: Vec<f64> = theta
            .flat()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = rng.random_range(-1.0..1.0);
                if mask.get(i).copied().unwrap_or(false) && v < 1e-3 {
                    0.0
                } else {
                    r
                }
            })
            .collect();
        let j = reg.mixed_jvp(&x, &theta, &w)?;
        let e = central_difference_error(
            |h| {
                let mut flat = theta.flat().to_vec();
                vecops::axpy(h, &dir, &mut flat);
                let th = theta.with_flat(flat)?;
                Ok(vecops::dot(reg.grad_x(&x, &th)?.data(), w.data()))
            },
            vecops::dot(&j, &dir),
        )?;
        jvp_err = jvp_err.max(e);
    }
    Ok(vec![
        CheckResult::at_most(format!("{name} grad_x vs FD"), grad_err, 1e-5),
        CheckResult::at_most(format!("{name} hvp_x vs FD"), hvp_err, 1e-5),
        CheckResult::at_most(format!("{name} mixed_jvp vs FD"), jvp_err, 1e-5),
    ])
}

/// Dense Cholesky solve of a symmetric positive definite system.
pub fn cholesky_solve(n: usize, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::NotPositiveDefinite { curvature: d, iteration: i as u64 });
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// CG on the CRR lower-level Hessian (through Hessian-vector products)
/// against a Cholesky solve of the same Hessian assembled column by column.
pub fn cg_direct_check(side: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::seed_from_u64(seed);
    let shape = Shape::gray(side, side);
    let reg = Crr::desk_default(Potential::new(PotentialKind::LogCosh, 10.0));
    let theta = random_theta(&reg, shape, &mut rng)?;
    let y = Image::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let inst = ProblemInstance::denoising(y.clone(), y.clone())?;
    let problem = LowerProblem::new(&inst, &reg, &theta);
    let n = shape.len();
    let mut dense = vec![0.0; n * n];
    for j in 0..n {
        let mut e = Image::zeros(shape);
        e.data_mut()[j] = 1.0;
        let col = problem.hvp(&y, &e)?;
        for i in 0..n {
            dense[i * n + j] = col.data()[i];
        }
    }
    // symmetrise round-off before factoring
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (dense[i * n + j] + dense[j * n + i]);
            dense[i * n + j] = m;
            dense[j * n + i] = m;
        }
    }
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let direct = cholesky_solve(n, &dense, &b)?;
    let op = SpdOperator::new(n, |v: &[f64]| Ok(problem.hvp(&y, &y.like(v.to_vec())?)?.data().to_vec()));
    let cg = cg_solve(&op, &b, 1e-12, 10 * n as u64, &CostCounter::new())?;
    let err = vecops::dist(&cg.q, &direct) / vecops::norm(&direct);
    Ok(CheckResult::at_most("cg vs cholesky (crr lower hessian)", err, 1e-8))
}

/// How a regime row's decay is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlopeAxis {
    /// `log L_K` against `log K`.
    Power,
    /// `log(L_K / log K)` against `log K`.
    PowerOverLog,
    /// `log L_K` against `log log K`.
    LogLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeRow {
    pub label: &'static str,
    pub step: Schedule,
    pub acc: Schedule,
    pub axis: SlopeAxis,
    /// Predicted decay exponent of `L_K` (twice the gradient-rate exponent).
    pub predicted: f64,
    /// One slope per consecutive decade pair.
    pub slopes: Vec<f64>,
    pub tolerance: f64,
}

impl RegimeRow {
    pub fn worst_relative_error(&self) -> f64 {
        self.slopes.iter().map(|s| ((s - self.predicted) / self.predicted).abs()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst_relative_error() <= self.tolerance
    }

    pub fn to_check(&self) -> CheckResult {
        CheckResult::at_most(format!("L_K slope, {}", self.label), self.worst_relative_error(), self.tolerance)
    }
}

/// Decade horizons of the regime table.
pub const REGIME_HORIZONS: [u64; 4] = [1_000, 10_000, 100_000, 1_000_000];

/// One representative schedule pair per rate-table row, with the decade
/// slopes of `l_k_sum` over [`REGIME_HORIZONS`].
pub fn lk_regime_table() -> Result<Vec<RegimeRow>> {
    let rows = [
        ("accuracy limited (p=0.05, q=0.51)", Schedule::polynomial(1.0, 0.51)?, Schedule::polynomial(1.0, 0.05)?, SlopeAxis::Power, -0.1, 0.10),
        ("boundary (p=0.2, q=0.6)", Schedule::polynomial(1.0, 0.6)?, Schedule::polynomial(1.0, 0.2)?, SlopeAxis::PowerOverLog, -0.4, 0.15),
        ("step limited (p=1, q=0.75)", Schedule::polynomial(1.0, 0.75)?, Schedule::polynomial(1.0, 1.0)?, SlopeAxis::Power, -0.25, 0.10),
        ("logarithmic (p=1, q=0.75)", Schedule::polynomial(1.0, 0.75)?, Schedule::logarithmic(1.0, 1.0)?, SlopeAxis::LogLog, -2.0, 0.10),
    ];
    let cap = *REGIME_HORIZONS.last().expect("nonempty");
    rows.into_iter()
        .map(|(label, step, acc, axis, predicted, tolerance)| {
            let values = l_k_series(&step, &acc, &REGIME_HORIZONS, cap)?;
            let point = |k: u64, l: f64| -> (f64, f64) {
                let lk = (k as f64).ln();
                match axis {
                    SlopeAxis::Power => (lk, l.ln()),
                    SlopeAxis::PowerOverLog => (lk, (l / lk).ln()),
                    SlopeAxis::LogLog => (lk.ln(), l.ln()),
                }
            };
            let pts: Vec<(f64, f64)> = REGIME_HORIZONS.iter().zip(&values).map(|(&k, &l)| point(k, l)).collect();
            let slopes = pts.windows(2).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
            Ok(RegimeRow { label, step, acc, axis, predicted, slopes, tolerance })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_matches_known_solution() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let x = cholesky_solve(2, &a, &[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-14);
        assert!(cholesky_solve(2, &[1.0, 2.0, 2.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn closed_form_toy_gradient_example() {
        let inst = ProblemInstance::denoising(
            Image::from_vec(Shape::new(1, 1, 1), vec![1.0]).unwrap(),
            Image::from_vec(Shape::new(1, 1, 1), vec![0.0]).unwrap(),
        )
        .unwrap();
        assert!((toy_closed_form_gradient(&[inst], &[1.0], 0.0) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_quadratic_is_exact() {
        let e = central_difference_error(|h| Ok((1.0 + h) * (1.0 + h)), 2.0).unwrap();
        assert!(e < 1e-9);
    }

    #[test]
    fn regime_rows_cover_the_table() {
        let rows = lk_regime_table().unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.slopes.len() == 3));
        for r in &rows[..3] {
            assert!(r.passed(), "{} slopes {:?}", r.label, r.slopes);
        }
    }

    #[test]
    fn display_names_outcome() {
        let c = CheckResult::at_most("x", 2.0, 1.0);
        assert!(!c.passed);
        assert!(c.to_string().starts_with("FAIL"));
    }
}

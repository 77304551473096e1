//! Conjugate gradients for matrix-free symmetric positive-definite operators.

use crate::cost::CostCounter;
use crate::error::{Error, Result};
use crate::vecops;

type ApplyFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'a;

pub struct SpdOperator<'a> {
    dim: usize,
    apply: Box<ApplyFn<'a>>,
}

impl<'a> SpdOperator<'a> {
    pub fn new(dim: usize, apply: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'a) -> Self {
        Self { dim, apply: Box::new(apply) }
    }

    /// Dense row-major `n x n` matrix.
    pub fn dense(n: usize, a: &'a [f64]) -> Self {
        assert_eq!(a.len(), n * n, "dense operator size");
        Self::new(n, move |v| Ok(a.chunks(n).map(|row| vecops::dot(row, v)).collect()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("operator of size {} applied to {}", self.dim, v.len())));
        }
        let out = (self.apply)(v)?;
        if out.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("operator returned {} entries, expected {}", out.len(), self.dim)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub q: Vec<f64>,
    /// Final residual norm `||A q - b||`.
    pub residual: f64,
    pub iters: u64,
    pub converged: bool,
}

/// Solves `A q = b` from `q = 0` to absolute residual `tol`.
pub fn cg_solve(op: &SpdOperator<'_>, b: &[f64], tol: f64, max_iters: u64, cost: &CostCounter) -> Result<CgResult> {
    cg_solve_from(op, b, None, tol, max_iters, cost)
}

/// As [`cg_solve`] with an optional initial guess. Each iteration applies the
/// operator once and is charged one cost unit.
pub fn cg_solve_from(
    op: &SpdOperator<'_>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iters: u64,
    cost: &CostCounter,
) -> Result<CgResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("CG tolerance must be positive, got {tol}")));
    }
    if b.len() != op.dim() {
        return Err(Error::ShapeMismatch(format!("right-hand side has {} entries, operator {}", b.len(), op.dim())));
    }
    if !vecops::all_finite(b) {
        return Err(Error::InvalidArgument("CG right-hand side is not finite".into()));
    }
    let mut q = match x0 {
        Some(x) if x.len() == b.len() => x.to_vec(),
        Some(x) => return Err(Error::ShapeMismatch(format!("warm start has {} entries, expected {}", x.len(), b.len()))),
        None => vec![0.0; b.len()],
    };
    let true_residual = |q: &[f64]| -> Result<Vec<f64>> {
        let aq = op.apply(q)?;
        Ok(vecops::sub(b, &aq))
    };
    let mut r = if x0.is_some() { true_residual(&q)? } else { b.to_vec() };
    let mut p = r.clone();
    let mut rr = vecops::dot(&r, &r);
    let mut iters = 0u64;
    loop {
        if rr.sqrt() <= tol {
            // guard against drift of the recursive residual
            let check = true_residual(&q)?;
            let cr = vecops::dot(&check, &check);
            if cr.sqrt() <= tol || iters >= max_iters {
                cost.add(iters);
                return Ok(CgResult { q, residual: cr.sqrt(), iters, converged: cr.sqrt() <= tol });
            }
            r = check;
            p = r.clone();
            rr = cr;
        }
        if iters >= max_iters {
            cost.add(iters);
            let residual = vecops::norm(&true_residual(&q)?);
            return Ok(CgResult { q, residual, iters, converged: residual <= tol });
        }
        let ap = op.apply(&p)?;
        let curvature = vecops::dot(&p, &ap);
        iters += 1;
        if !(curvature > 0.0) {
            cost.add(iters);
            return Err(Error::NotPositiveDefinite { curvature, iteration: iters });
        }
        let alpha = rr / curvature;
        vecops::axpy(alpha, &p, &mut q);
        vecops::axpy(-alpha, &ap, &mut r);
        let rr_new = vecops::dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    /// Gaussian elimination with partial pivoting.
    fn direct_solve(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut row = a[i * n..(i + 1) * n].to_vec();
            row.push(b[i]);
            row
        }).collect();
        for c in 0..n {
            let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, piv);
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
            x[r] = (m[r][n] - s) / m[r][r];
        }
        x
    }

    fn random_spd(n: usize, rng: &mut Rng) -> Vec<f64> {
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| g[k * n + i] * g[k * n + j]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn identity_one_iteration() {
        let op = SpdOperator::new(3, |v| Ok(v.to_vec()));
        let cost = CostCounter::new();
        let r = cg_solve(&op, &[1.0, -2.0, 3.0], 1e-12, 10, &cost).unwrap();
        assert_eq!(r.q, vec![1.0, -2.0, 3.0]);
        assert_eq!(r.iters, 1);
        assert_eq!(cost.get(), 1);
    }

    #[test]
    fn diagonal_exact_in_three() {
        let a = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 4.0];
        let op = SpdOperator::dense(3, &a);
        let r = cg_solve(&op, &[1.0, 2.0, 4.0], 1e-12, 10, &CostCounter::new()).unwrap();
        assert!(r.iters <= 3);
        for v in r.q {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_solve() {
        let mut rng = Rng::seed_from_u64(1);
        let a = random_spd(8, &mut rng);
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let op = SpdOperator::dense(8, &a);
        let r = cg_solve(&op, &b, 1e-10, 100, &CostCounter::new()).unwrap();
        let x = direct_solve(8, &a, &b);
        assert!(vecops::dist(&r.q, &x) < 1e-8);
    }

    #[test]
    fn rejects_indefinite_operator() {
        let a = [1.0, 0.0, 0.0, -1.0];
        let op = SpdOperator::dense(2, &a);
        let err = cg_solve(&op, &[0.0, 1.0], 1e-10, 10, &CostCounter::new()).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn warm_start_from_solution_is_free() {
        let a = [2.0, 0.5, 0.5, 1.0];
        let op = SpdOperator::dense(2, &a);
        let b = [1.0, 1.0];
        let cold = cg_solve(&op, &b, 1e-12, 10, &CostCounter::new()).unwrap();
        let cost = CostCounter::new();
        let warm = cg_solve_from(&op, &b, Some(&cold.q), 1e-10, 10, &cost).unwrap();
        assert_eq!(warm.iters, 0);
        assert_eq!(cost.get(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn reaches_tolerance_on_conditioned_diagonals(seed in any::<u64>(), log_cond in 0.0f64..6.0) {
            let mut rng = Rng::seed_from_u64(seed);
            let n = 12;
            // random orthogonal-free test: diagonal spectrum in [1, 10^log_cond] after a random rotation pair
            let d: Vec<f64> = (0..n).map(|i| 10f64.powf(log_cond * i as f64 / (n - 1) as f64)).collect();
            let c = rng.random_range(-1.0f64..1.0);
            let s = (1.0 - c * c).sqrt();
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                a[i * n + i] = d[i];
            }
            // rotate coordinates 0 and 1
            let (a00, a11) = (d[0], d[1]);
            a[0] = c * c * a00 + s * s * a11;
            a[n + 1] = s * s * a00 + c * c * a11;
            a[1] = c * s * (a00 - a11);
            a[n] = a[1];
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let op = SpdOperator::dense(n, &a);
            let cost = CostCounter::new();
            let r = cg_solve(&op, &b, 1e-8, 10 * n as u64, &cost).unwrap();
            prop_assert!(r.residual <= 1e-8);
            prop_assert_eq!(cost.get(), r.iters);
        }
    }
}

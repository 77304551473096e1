//! Convex ridge regularizer `R(x) = sum psi(e^s * W x)` with a linear
//! convolutional stack `W` and per-output-channel log-scales `s`.

use rand_distr::{Distribution, Normal};

use super::{Layout, Potential, Regularizer, TensorSpec, ThetaParams};
use crate::conv::ConvStack;
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::vecops;
use crate::Rng;

pub const LOG_SCALE: &str = "log_scale";

#[derive(Clone, Debug)]
pub struct Crr {
    pub stack: ConvStack,
    pub potential: Potential,
    pub init_log_scale: f64,
    pub power_iters: usize,
    pub norm_seed: u64,
}

/// Result of a spectral normalization pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeOutcome {
    /// Operator norm estimate before rescaling.
    pub estimate: f64,
    /// False when the operator was numerically zero and left unchanged.
    pub scaled: bool,
}

/// Rescales all kernels by a common factor so the composite operator has
/// unit spectral norm on inputs of `shape`.
pub fn spectral_normalize(
    stack: &ConvStack,
    kernels: &mut [Vec<f64>],
    shape: Shape,
    iters: usize,
    seed: u64,
) -> Result<NormalizeOutcome> {
    if iters == 0 {
        return Err(Error::InvalidArgument("power iteration count must be at least 1".into()));
    }
    let refs: Vec<&[f64]> = kernels.iter().map(Vec::as_slice).collect();
    let estimate = stack.operator_norm(&refs, shape, iters, seed);
    if !(estimate > f64::MIN_POSITIVE) || !estimate.is_finite() {
        return Ok(NormalizeOutcome { estimate, scaled: false });
    }
    let factor = estimate.powf(-1.0 / kernels.len() as f64);
    for k in kernels.iter_mut() {
        vecops::scale(factor, k);
    }
    Ok(NormalizeOutcome { estimate, scaled: true })
}

fn conv_name(l: usize) -> String {
    format!("conv{l}")
}

/// Subtracts the mean of every `k x k` filter slice.
fn zero_mean_filters(w: &mut [f64], filter_len: usize) {
    for f in w.chunks_mut(filter_len) {
        let mean = f.iter().sum::<f64>() / filter_len as f64;
        for v in f {
            *v -= mean;
        }
    }
}

struct Forward {
    kernels: Vec<Vec<f64>>,
    scales: Vec<f64>,
    acts: Vec<Image>,
}

impl Crr {
    pub fn new(stack: ConvStack, potential: Potential) -> Self {
        Self { stack, potential, init_log_scale: 0.0, power_iters: 50, norm_seed: 0x5eed }
    }

    /// Grayscale input, layers `1 -> 4 -> 8`, 5x5 kernels.
    pub fn desk_default(potential: Potential) -> Self {
        Self::new(ConvStack::new(1, &[4, 8], 5), potential)
    }

    /// Zero-mean kernels actually applied to images.
    pub fn effective_kernels(&self, theta: &ThetaParams) -> Result<Vec<Vec<f64>>> {
        theta.ensure_layout(&self.layout())?;
        Ok(self
            .stack
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                let mut w = theta.tensor(&conv_name(l)).expect("layout checked").to_vec();
                zero_mean_filters(&mut w, spec.filter_len());
                w
            })
            .collect())
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.shape().channels != self.stack.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "CRR expects {} input channels, got {}",
                self.stack.in_channels(),
                x.shape().channels
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &Image, theta: &ThetaParams) -> Result<Forward> {
        self.check_input(x)?;
        let kernels = self.effective_kernels(theta)?;
        let scales = theta.tensor(LOG_SCALE).expect("layout checked").iter().map(|s| s.exp()).collect();
        let refs: Vec<&[f64]> = kernels.iter().map(Vec::as_slice).collect();
        let acts = self.stack.forward_all(&refs, x);
        Ok(Forward { kernels, scales, acts })
    }

    fn plane(x: &Image) -> usize {
        x.shape().height * x.shape().width
    }
}

impl Regularizer for Crr {
    fn name(&self) -> &'static str {
        "crr"
    }

    fn layout(&self) -> Layout {
        let mut specs: Vec<TensorSpec> = self
            .stack
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| TensorSpec::new(conv_name(l), spec.weight_shape()))
            .collect();
        specs.push(TensorSpec::new(LOG_SCALE, vec![self.stack.out_channels()]));
        Layout::new(specs)
    }

    fn init_params(&self, shape: Shape, rng: &mut Rng) -> Result<ThetaParams> {
        let mut theta = ThetaParams::zeros(self.layout());
        for (l, spec) in self.stack.layers.iter().enumerate() {
            let fan = (spec.in_channels + spec.out_channels) * spec.filter_len();
            let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("finite std");
            for v in theta.tensor_mut(&conv_name(l)).expect("own layout") {
                *v = normal.sample(rng);
            }
        }
        theta.tensor_mut(LOG_SCALE).expect("own layout").fill(self.init_log_scale);
        self.project(&mut theta, shape)?;
        Ok(theta)
    }

    fn value(&self, x: &Image, theta: &ThetaParams) -> Result<f64> {
        let f = self.forward(x, theta)?;
        let u = f.acts.last().expect("non-empty");
        let plane = Self::plane(x);
        let mut acc = vecops::CompensatedSum::new();
        for (c, &e) in f.scales.iter().enumerate() {
            for &t in &u.data()[c * plane..(c + 1) * plane] {
                acc.add(self.potential.value(e * t));
            }
        }
        Ok(acc.value())
    }

    fn grad_x(&self, x: &Image, theta: &ThetaParams) -> Result<Image> {
        let f = self.forward(x, theta)?;
        let mut g = f.acts.last().expect("non-empty").clone();
        let plane = Self::plane(x);
        for (c, &e) in f.scales.iter().enumerate() {
            for t in &mut g.data_mut()[c * plane..(c + 1) * plane] {
                *t = e * self.potential.d1(e * *t);
            }
        }
        let refs: Vec<&[f64]> = f.kernels.iter().map(Vec::as_slice).collect();
        Ok(self.stack.adjoint(&refs, &g))
    }

    fn hvp_x(&self, x: &Image, theta: &ThetaParams, v: &Image) -> Result<Image> {
        x.ensure_same_shape(v, "hvp direction")?;
        let f = self.forward(x, theta)?;
        let refs: Vec<&[f64]> = f.kernels.iter().map(Vec::as_slice).collect();
        let mut wv = self.stack.forward(&refs, v);
        let u = f.acts.last().expect("non-empty");
        let plane = Self::plane(x);
        for (c, &e) in f.scales.iter().enumerate() {
            let range = c * plane..(c + 1) * plane;
            for (t, &ui) in wv.data_mut()[range.clone()].iter_mut().zip(&u.data()[range]) {
                *t *= e * e * self.potential.d2(e * ui);
            }
        }
        Ok(self.stack.adjoint(&refs, &wv))
    }

    fn mixed_jvp(&self, x: &Image, theta: &ThetaParams, q: &Image) -> Result<Vec<f64>> {
        x.ensure_same_shape(q, "mixed jvp direction")?;
        let f = self.forward(x, theta)?;
        let refs: Vec<&[f64]> = f.kernels.iter().map(Vec::as_slice).collect();
        let acts_q = self.stack.forward_all(&refs, q);
        let u = f.acts.last().expect("non-empty");
        let w = acts_q.last().expect("non-empty");
        let plane = Self::plane(x);
        let oshape = u.shape();
        // G = <e^s psi'(e^s u), w> with u = W x, w = W q
        let mut a = vec![0.0; oshape.len()];
        let mut b = vec![0.0; oshape.len()];
        let mut ds = vec![0.0; f.scales.len()];
        for (c, &e) in f.scales.iter().enumerate() {
            let mut acc = vecops::CompensatedSum::new();
            for i in c * plane..(c + 1) * plane {
                let t = e * u.data()[i];
                let d1 = self.potential.d1(t);
                let d2 = self.potential.d2(t);
                a[i] = e * e * d2 * w.data()[i];
                b[i] = e * d1;
                acc.add(e * d1 * w.data()[i] + e * d2 * t * w.data()[i]);
            }
            ds[c] = acc.value();
        }
        let a = Image::from_vec(oshape, a)?;
        let b = Image::from_vec(oshape, b)?;
        let mut grads: Vec<Vec<f64>> = self.stack.layers.iter().map(|s| vec![0.0; s.weight_len()]).collect();
        self.stack.kernel_grads(&refs, &f.acts, &a, &mut grads);
        self.stack.kernel_grads(&refs, &acts_q, &b, &mut grads);
        let mut out = Vec::with_capacity(theta.len());
        for (spec, mut g) in self.stack.layers.iter().zip(grads) {
            zero_mean_filters(&mut g, spec.filter_len());
            out.extend_from_slice(&g);
        }
        out.extend_from_slice(&ds);
        Ok(out)
    }

    /// Stores the kernels in zero-mean form and rescales them to unit
    /// composite spectral norm on inputs of `shape`.
    fn project(&self, theta: &mut ThetaParams, shape: Shape) -> Result<()> {
        let mut kernels = self.effective_kernels(theta)?;
        spectral_normalize(&self.stack, &mut kernels, shape, self.power_iters, self.norm_seed)?;
        for (l, k) in kernels.into_iter().enumerate() {
            theta.tensor_mut(&conv_name(l)).expect("layout checked").copy_from_slice(&k);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::PotentialKind;
    use super::*;
    use crate::conv::ConvSpec;
    use rand::{Rng as _, SeedableRng};

    fn rand_image(shape: Shape, rng: &mut Rng) -> Image {
        Image::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(kind: PotentialKind) -> Crr {
        Crr::new(ConvStack::new(1, &[2, 3], 3), Potential::new(kind, 2.0))
    }

    fn random_theta(r: &Crr, shape: Shape, rng: &mut Rng) -> ThetaParams {
        let mut t = r.init_params(shape, rng).unwrap();
        for v in t.tensor_mut(LOG_SCALE).unwrap() {
            *v = rng.random_range(-0.5..0.5);
        }
        t
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_input_gives_zero() {
        let r = Crr::desk_default(Potential::new(PotentialKind::Huber, 10.0));
        let shape = Shape::gray(8, 8);
        let mut rng = Rng::seed_from_u64(1);
        let t = r.init_params(shape, &mut rng).unwrap();
        let x = Image::zeros(shape);
        assert_eq!(r.value(&x, &t).unwrap(), 0.0);
        assert!(r.grad_x(&x, &t).unwrap().data().iter().all(|&v| v == 0.0));
        for k in r.effective_kernels(&t).unwrap() {
            for f in k.chunks(25) {
                assert!(f.iter().sum::<f64>().abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_channels() {
        let r = small(PotentialKind::LogCosh);
        let mut rng = Rng::seed_from_u64(2);
        let t = r.init_params(Shape::gray(4, 4), &mut rng).unwrap();
        let x = Image::zeros(Shape::new(2, 4, 4));
        assert!(matches!(r.value(&x, &t), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let r = small(PotentialKind::LogCosh);
        let shape = Shape::gray(6, 5);
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..10 {
            let t = random_theta(&r, shape, &mut rng);
            let x = rand_image(shape, &mut rng);
            let g = r.grad_x(&x, &t).unwrap();
            let d = rand_image(shape, &mut rng);
            let h = 1e-5;
            let mut xp = x.clone();
            let mut xm = x.clone();
            vecops::axpy(h, d.data(), xp.data_mut());
            vecops::axpy(-h, d.data(), xm.data_mut());
            let fd = (r.value(&xp, &t).unwrap() - r.value(&xm, &t).unwrap()) / (2.0 * h);
            assert!(rel_err(fd, vecops::dot(g.data(), d.data())) < 1e-6);
        }
    }

    #[test]
    fn hvp_symmetric_psd_and_matches_fd() {
        for kind in [PotentialKind::LogCosh, PotentialKind::Huber] {
            let r = small(kind);
            let shape = Shape::gray(5, 5);
            let mut rng = Rng::seed_from_u64(4);
            let t = random_theta(&r, shape, &mut rng);
            let x = rand_image(shape, &mut rng);
            let v = rand_image(shape, &mut rng);
            let w = rand_image(shape, &mut rng);
            let hv = r.hvp_x(&x, &t, &v).unwrap();
            let hw = r.hvp_x(&x, &t, &w).unwrap();
            let (a, b) = (vecops::dot(hv.data(), w.data()), vecops::dot(v.data(), hw.data()));
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            assert!(vecops::dot(hv.data(), v.data()) >= -1e-10);
            if kind == PotentialKind::LogCosh {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                vecops::axpy(h, v.data(), xp.data_mut());
                vecops::axpy(-h, v.data(), xm.data_mut());
                let gp = r.grad_x(&xp, &t).unwrap();
                let gm = r.grad_x(&xm, &t).unwrap();
                let fd: Vec<f64> = gp.data().iter().zip(gm.data()).map(|(p, m)| (p - m) / (2.0 * h)).collect();
                let err = vecops::dist(&fd, hv.data()) / vecops::norm(hv.data());
                assert!(err < 1e-5, "hvp rel err {err}");
            }
        }
    }

    #[test]
    fn mixed_jvp_matches_fd_in_theta() {
        let r = small(PotentialKind::LogCosh);
        let shape = Shape::gray(5, 6);
        let mut rng = Rng::seed_from_u64(5);
        let t = random_theta(&r, shape, &mut rng);
        let x = rand_image(shape, &mut rng);
        let q = rand_image(shape, &mut rng);
        let j = r.mixed_jvp(&x, &t, &q).unwrap();
        let g = |flat: Vec<f64>| {
            let th = t.with_flat(flat).unwrap();
            vecops::dot(r.grad_x(&x, &th).unwrap().data(), q.data())
        };
        let dir: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let mut p = t.flat().to_vec();
        let mut m = t.flat().to_vec();
        vecops::axpy(h, &dir, &mut p);
        vecops::axpy(-h, &dir, &mut m);
        let fd = (g(p) - g(m)) / (2.0 * h);
        assert!(rel_err(fd, vecops::dot(&j, &dir)) < 1e-5);
        // s-component alone
        let n = t.len();
        let mut p = t.flat().to_vec();
        let mut m = t.flat().to_vec();
        p[n - 1] += h;
        m[n - 1] -= h;
        let fd = (g(p) - g(m)) / (2.0 * h);
        assert!(rel_err(fd, j[n - 1]) < 1e-5);
    }

    #[test]
    fn mixed_jvp_linear_in_q() {
        let r = small(PotentialKind::Huber);
        let shape = Shape::gray(4, 4);
        let mut rng = Rng::seed_from_u64(6);
        let t = random_theta(&r, shape, &mut rng);
        let x = rand_image(shape, &mut rng);
        let q1 = rand_image(shape, &mut rng);
        let q2 = rand_image(shape, &mut rng);
        let combo = q1.like(q1.data().iter().zip(q2.data()).map(|(a, b)| 1.7 * a + b).collect()).unwrap();
        let j1 = r.mixed_jvp(&x, &t, &q1).unwrap();
        let j2 = r.mixed_jvp(&x, &t, &q2).unwrap();
        let jc = r.mixed_jvp(&x, &t, &combo).unwrap();
        for i in 0..jc.len() {
            assert!((jc[i] - (1.7 * j1[i] + j2[i])).abs() <= 1e-12 * (1.0 + jc[i].abs()));
        }
        assert!(r.mixed_jvp(&x, &t, &Image::zeros(shape)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_monotone() {
        let r = small(PotentialKind::Huber);
        let shape = Shape::gray(5, 5);
        let mut rng = Rng::seed_from_u64(7);
        let t = random_theta(&r, shape, &mut rng);
        for _ in 0..100 {
            let x1 = rand_image(shape, &mut rng);
            let x2 = rand_image(shape, &mut rng);
            let g1 = r.grad_x(&x1, &t).unwrap();
            let g2 = r.grad_x(&x2, &t).unwrap();
            let d = vecops::dot(&vecops::sub(g1.data(), g2.data()), &vecops::sub(x1.data(), x2.data()));
            assert!(d >= -1e-10);
        }
    }

    #[test]
    fn spectral_normalize_examples() {
        let stack = ConvStack { layers: vec![ConvSpec::new(1, 1, 1)] };
        let mut k = vec![vec![3.0]];
        let out = spectral_normalize(&stack, &mut k, Shape::gray(4, 4), 10, 1).unwrap();
        assert!((out.estimate - 3.0).abs() < 1e-12);
        assert!((k[0][0] - 1.0).abs() < 1e-12);

        let stack = ConvStack::new(1, &[1], 3);
        let mut k = vec![vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]];
        spectral_normalize(&stack, &mut k, Shape::gray(6, 6), 50, 1).unwrap();
        assert!((k[0][4] - 1.0).abs() < 1e-2);

        let mut zero = vec![vec![0.0; 9]];
        let out = spectral_normalize(&stack, &mut zero, Shape::gray(6, 6), 5, 1).unwrap();
        assert!(!out.scaled);
        assert!(spectral_normalize(&stack, &mut zero, Shape::gray(6, 6), 0, 1).is_err());
    }

    #[test]
    fn random_stack_normalizes_to_unit_norm() {
        let stack = ConvStack::new(1, &[4, 8, 16], 5);
        let shape = Shape::gray(16, 16);
        let mut rng = Rng::seed_from_u64(8);
        let mut kernels: Vec<Vec<f64>> =
            stack.layers.iter().map(|s| (0..s.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        spectral_normalize(&stack, &mut kernels, shape, 50, 11).unwrap();
        let refs: Vec<&[f64]> = kernels.iter().map(Vec::as_slice).collect();
        let est = stack.operator_norm(&refs, shape, 50, 99);
        assert!((0.9..=1.01).contains(&est), "post-normalization estimate {est}");
    }
}

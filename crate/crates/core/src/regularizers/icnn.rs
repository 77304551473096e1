//! Two-layer input-convex network
//! `R(x) = sum_c e^{s_c} sum phi(W_z phi(W_x x + b_x) + b_z)_c`
//! with `W_z >= 0` and a smoothed clipped ReLU `phi`.

use rand_distr::{Distribution, Normal};

use super::{Layout, Regularizer, TensorSpec, ThetaParams};
use crate::conv::{conv_adjoint, conv_forward, conv_kernel_grad, ConvSpec};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::vecops;
use crate::Rng;

const W_X: &str = "w_x";
const B_X: &str = "b_x";
const W_Z: &str = "w_z";
const B_Z: &str = "b_z";
const LOG_SCALE: &str = "log_scale";

/// `(phi(u), phi'(u), phi''(u))` for the quadratic-smoothed ReLU with width `nu`.
pub fn smoothed_relu(u: f64, nu: f64) -> (f64, f64, f64) {
    if u < 0.0 {
        (0.0, 0.0, 0.0)
    } else if u < nu {
        (u * u / (2.0 * nu), u / nu, 1.0 / nu)
    } else {
        (u - 0.5 * nu, 1.0, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct Icnn {
    pub wx: ConvSpec,
    pub wz: ConvSpec,
    pub nu: f64,
    pub init_log_scale: f64,
    /// Scale of the half-normal initialization of `W_z`.
    pub init_wz_scale: f64,
}

struct Forward {
    wx: Vec<f64>,
    wz: Vec<f64>,
    scales: Vec<f64>,
    a1: Image,
    h1: Image,
    a2: Image,
}

fn add_bias(img: &mut Image, bias: &[f64]) {
    let plane = img.shape().height * img.shape().width;
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut img.data_mut()[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums(img: &Image) -> Vec<f64> {
    let s = img.shape();
    (0..s.channels).map(|c| img.channel(c).iter().sum()).collect()
}

impl Icnn {
    pub fn new(in_channels: usize, hidden: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            wx: ConvSpec::new(in_channels, hidden, kernel),
            wz: ConvSpec::new(hidden, out_channels, kernel),
            nu: 1e-3,
            init_log_scale: 0.0,
            init_wz_scale: 0.1,
        }
    }

    /// Grayscale input, `8` hidden and `8` output channels, 3x3 kernels.
    pub fn desk_default() -> Self {
        Self::new(1, 8, 8, 3)
    }

    fn forward(&self, x: &Image, theta: &ThetaParams) -> Result<Forward> {
        theta.ensure_layout(&self.layout())?;
        if x.shape().channels != self.wx.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "ICNN expects {} input channels, got {}",
                self.wx.in_channels,
                x.shape().channels
            )));
        }
        let wz = theta.tensor(W_Z).expect("layout checked");
        if let Some(bad) = wz.iter().find(|&&w| w < 0.0) {
            return Err(Error::Constraint(format!("ICNN W_z has a negative entry {bad}")));
        }
        let wx = theta.tensor(W_X).expect("layout checked").to_vec();
        let wz = wz.to_vec();
        let mut a1 = conv_forward(&self.wx, &wx, x);
        add_bias(&mut a1, theta.tensor(B_X).expect("layout checked"));
        let h1 = a1.like(a1.data().iter().map(|&u| smoothed_relu(u, self.nu).0).collect())?;
        let mut a2 = conv_forward(&self.wz, &wz, &h1);
        add_bias(&mut a2, theta.tensor(B_Z).expect("layout checked"));
        let scales = theta.tensor(LOG_SCALE).expect("layout checked").iter().map(|s| s.exp()).collect();
        Ok(Forward { wx, wz, scales, a1, h1, a2 })
    }

    fn map(&self, img: &Image, f: impl Fn(f64) -> f64) -> Image {
        img.like(img.data().iter().map(|&u| f(u)).collect()).expect("same length")
    }

    fn d1(&self, img: &Image) -> Image {
        self.map(img, |u| smoothed_relu(u, self.nu).1)
    }

    fn d2(&self, img: &Image) -> Image {
        self.map(img, |u| smoothed_relu(u, self.nu).2)
    }

    /// Multiplies each output channel by its scale.
    fn scaled(&self, f: &Forward, img: Image) -> Image {
        let plane = img.shape().height * img.shape().width;
        let mut out = img;
        for (c, &e) in f.scales.iter().enumerate() {
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                *v *= e;
            }
        }
        out
    }
}

fn hadamard(a: &Image, b: &Image) -> Image {
    a.like(a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()).expect("same length")
}

impl Regularizer for Icnn {
    fn name(&self) -> &'static str {
        "icnn"
    }

    fn layout(&self) -> Layout {
        Layout::new(vec![
            TensorSpec::new(W_X, self.wx.weight_shape()),
            TensorSpec::new(B_X, vec![self.wx.out_channels]),
            TensorSpec::new(W_Z, self.wz.weight_shape()),
            TensorSpec::new(B_Z, vec![self.wz.out_channels]),
            TensorSpec::new(LOG_SCALE, vec![self.wz.out_channels]),
        ])
    }

    fn nonneg_mask(&self) -> Vec<bool> {
        vec![false, false, true, false, false]
    }

    fn init_params(&self, _shape: Shape, rng: &mut Rng) -> Result<ThetaParams> {
        let mut theta = ThetaParams::zeros(self.layout());
        let fan = (self.wx.in_channels + self.wx.out_channels) * self.wx.filter_len();
        let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("finite std");
        let wx = theta.tensor_mut(W_X).expect("own layout");
        for v in wx.iter_mut() {
            *v = normal.sample(rng);
        }
        let k = self.wx.filter_len();
        for f in wx.chunks_mut(k) {
            let mean = f.iter().sum::<f64>() / k as f64;
            f.iter_mut().for_each(|v| *v -= mean);
        }
        let fan = (self.wz.in_channels + self.wz.out_channels) * self.wz.filter_len();
        let normal = Normal::new(0.0, self.init_wz_scale * (2.0 / fan as f64).sqrt()).expect("finite std");
        for v in theta.tensor_mut(W_Z).expect("own layout") {
            *v = f64::abs(normal.sample(rng));
        }
        theta.tensor_mut(LOG_SCALE).expect("own layout").fill(self.init_log_scale);
        Ok(theta)
    }

    fn value(&self, x: &Image, theta: &ThetaParams) -> Result<f64> {
        let f = self.forward(x, theta)?;
        let plane = x.shape().height * x.shape().width;
        let mut acc = vecops::CompensatedSum::new();
        for (c, &e) in f.scales.iter().enumerate() {
            for &u in &f.a2.data()[c * plane..(c + 1) * plane] {
                acc.add(e * smoothed_relu(u, self.nu).0);
            }
        }
        Ok(acc.value())
    }

    fn grad_x(&self, x: &Image, theta: &ThetaParams) -> Result<Image> {
        let f = self.forward(x, theta)?;
        let g2 = self.scaled(&f, self.d1(&f.a2));
        let m = conv_adjoint(&self.wz, &f.wz, &g2);
        let g1 = hadamard(&self.d1(&f.a1), &m);
        Ok(conv_adjoint(&self.wx, &f.wx, &g1))
    }

    fn hvp_x(&self, x: &Image, theta: &ThetaParams, v: &Image) -> Result<Image> {
        x.ensure_same_shape(v, "hvp direction")?;
        let f = self.forward(x, theta)?;
        let p1 = self.d1(&f.a1);
        let da1 = conv_forward(&self.wx, &f.wx, v);
        let da2 = conv_forward(&self.wz, &f.wz, &hadamard(&p1, &da1));
        let dg2 = self.scaled(&f, hadamard(&self.d2(&f.a2), &da2));
        let dm = conv_adjoint(&self.wz, &f.wz, &dg2);
        let m = conv_adjoint(&self.wz, &f.wz, &self.scaled(&f, self.d1(&f.a2)));
        let curv1 = hadamard(&hadamard(&self.d2(&f.a1), &da1), &m);
        let dg1 = curv1.like(vecops::add(curv1.data(), hadamard(&p1, &dm).data()))?;
        Ok(conv_adjoint(&self.wx, &f.wx, &dg1))
    }

    fn mixed_jvp(&self, x: &Image, theta: &ThetaParams, q: &Image) -> Result<Vec<f64>> {
        x.ensure_same_shape(q, "mixed jvp direction")?;
        let f = self.forward(x, theta)?;
        let p1 = self.d1(&f.a1);
        let p2 = self.d1(&f.a2);
        let g2 = self.scaled(&f, p2.clone());
        let m = conv_adjoint(&self.wz, &f.wz, &g2);
        // G = <phi'(a1) * m, r>, r = W_x q
        let r = conv_forward(&self.wx, &f.wx, q);
        let mut gwx = vec![0.0; self.wx.weight_len()];
        let mut gwz = vec![0.0; self.wz.weight_len()];
        conv_kernel_grad(&self.wx, q, &hadamard(&p1, &m), &mut gwx);
        let c1 = hadamard(&p1, &r);
        conv_kernel_grad(&self.wz, &c1, &g2, &mut gwz);
        let e2 = conv_forward(&self.wz, &f.wz, &c1);
        let ds = channel_sums(&hadamard(&self.scaled(&f, p2), &e2));
        let da2 = self.scaled(&f, hadamard(&self.d2(&f.a2), &e2));
        let gbz = channel_sums(&da2);
        conv_kernel_grad(&self.wz, &f.h1, &da2, &mut gwz);
        let dh1 = conv_adjoint(&self.wz, &f.wz, &da2);
        let da1_a = hadamard(&hadamard(&self.d2(&f.a1), &m), &r);
        let da1 = da1_a.like(vecops::add(da1_a.data(), hadamard(&p1, &dh1).data()))?;
        let gbx = channel_sums(&da1);
        conv_kernel_grad(&self.wx, x, &da1, &mut gwx);
        let mut out = Vec::with_capacity(theta.len());
        out.extend(gwx);
        out.extend(gbx);
        out.extend(gwz);
        out.extend(gbz);
        out.extend(ds);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn rand_image(shape: Shape, rng: &mut Rng) -> Image {
        Image::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Wider smoothing keeps finite differences away from the branch points.
    fn net() -> Icnn {
        let mut n = Icnn::new(1, 3, 2, 3);
        n.nu = 0.5;
        n.init_wz_scale = 1.0;
        n
    }

    fn theta(n: &Icnn, rng: &mut Rng) -> ThetaParams {
        let mut t = n.init_params(Shape::gray(5, 5), rng).unwrap();
        for v in t.tensor_mut(B_X).unwrap() {
            *v = rng.random_range(-0.2..0.2);
        }
        for v in t.tensor_mut(B_Z).unwrap() {
            *v = rng.random_range(0.0..0.5);
        }
        for v in t.tensor_mut(LOG_SCALE).unwrap() {
            *v = rng.random_range(-0.5..0.5);
        }
        t
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central difference that retries with a smaller step if a branch point
    /// spoils the first attempt.
    fn fd_close(f: impl Fn(f64) -> f64, exact: f64, tol: f64) -> bool {
        [1e-6, 1e-7, 3e-8].iter().any(|&h| rel((f(h) - f(-h)) / (2.0 * h), exact) < tol)
    }

    #[test]
    fn activation_examples() {
        let nu = 1e-3;
        assert_eq!(smoothed_relu(-1.0, nu).0, 0.0);
        assert!((smoothed_relu(nu / 2.0, nu).0 - nu / 8.0).abs() < 1e-18);
        assert!((smoothed_relu(2.0 * nu, nu).0 - 1.5 * nu).abs() < 1e-18);
        assert_eq!(smoothed_relu(-1.0, nu).1, 0.0);
        assert!((smoothed_relu(nu / 2.0, nu).1 - 0.5).abs() < 1e-12);
        assert_eq!(smoothed_relu(2.0 * nu, nu).1, 1.0);
    }

    #[test]
    fn negative_wz_is_rejected_and_clamped() {
        let n = net();
        let mut rng = Rng::seed_from_u64(1);
        let mut t = theta(&n, &mut rng);
        t.tensor_mut(W_Z).unwrap()[0] = -1.0;
        let x = rand_image(Shape::gray(5, 5), &mut rng);
        assert!(matches!(n.value(&x, &t), Err(Error::Constraint(_))));
        n.project(&mut t, x.shape()).unwrap();
        assert_eq!(t.tensor(W_Z).unwrap()[0], 0.0);
        assert!(n.value(&x, &t).is_ok());
    }

    #[test]
    fn midpoint_convexity() {
        let n = Icnn::new(1, 4, 2, 3);
        let mut rng = Rng::seed_from_u64(2);
        let t = theta(&n, &mut rng);
        let shape = Shape::gray(6, 6);
        for _ in 0..100 {
            let x1 = rand_image(shape, &mut rng);
            let x2 = rand_image(shape, &mut rng);
            let mid = x1.like(x1.data().iter().zip(x2.data()).map(|(a, b)| 0.5 * (a + b)).collect()).unwrap();
            let lhs = n.value(&mid, &t).unwrap();
            let rhs = 0.5 * (n.value(&x1, &t).unwrap() + n.value(&x2, &t).unwrap());
            assert!(lhs <= rhs + 1e-10);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let n = net();
        let shape = Shape::gray(5, 5);
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..5 {
            let t = theta(&n, &mut rng);
            let x = rand_image(shape, &mut rng);
            let d = rand_image(shape, &mut rng);
            let shifted = |h: f64| {
                let mut xs = x.clone();
                vecops::axpy(h, d.data(), xs.data_mut());
                xs
            };
            let g = n.grad_x(&x, &t).unwrap();
            assert!(fd_close(|h| n.value(&shifted(h), &t).unwrap(), vecops::dot(g.data(), d.data()), 1e-5));

            let w = rand_image(shape, &mut rng);
            let hd = n.hvp_x(&x, &t, &d).unwrap();
            assert!(fd_close(
                |h| vecops::dot(n.grad_x(&shifted(h), &t).unwrap().data(), w.data()),
                vecops::dot(hd.data(), w.data()),
                1e-5
            ));
            let hw = n.hvp_x(&x, &t, &w).unwrap();
            let (a, b) = (vecops::dot(hd.data(), w.data()), vecops::dot(d.data(), hw.data()));
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            assert!(vecops::dot(hd.data(), d.data()) >= -1e-10);

            let q = rand_image(shape, &mut rng);
            let j = n.mixed_jvp(&x, &t, &q).unwrap();
            let dir: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let at = |h: f64| {
                let mut flat = t.flat().to_vec();
                vecops::axpy(h, &dir, &mut flat);
                // keep W_z feasible: only move it where it is safely positive
                let mut th = t.with_flat(flat).unwrap();
                let r = th.layout().range(2);
                for (i, v) in th.flat_mut()[r.clone()].iter_mut().enumerate() {
                    if t.flat()[r.start + i] < 1e-3 {
                        *v = t.flat()[r.start + i];
                    }
                }
                vecops::dot(n.grad_x(&x, &th).unwrap().data(), q.data())
            };
            let r = t.layout().range(2);
            let exact: f64 = j
                .iter()
                .zip(&dir)
                .enumerate()
                .filter(|(i, _)| !(r.contains(i) && t.flat()[*i] < 1e-3))
                .map(|(_, (a, b))| a * b)
                .sum();
            assert!(fd_close(at, exact, 1e-5));
        }
    }

    #[test]
    fn mixed_jvp_zero_direction() {
        let n = net();
        let mut rng = Rng::seed_from_u64(4);
        let t = theta(&n, &mut rng);
        let x = rand_image(Shape::gray(4, 4), &mut rng);
        assert!(n.mixed_jvp(&x, &t, &Image::zeros(x.shape())).unwrap().iter().all(|&v| v == 0.0));
    }
}

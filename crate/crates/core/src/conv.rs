//! Zero-padded "same" 2-D convolutions (cross-correlation), their adjoints
//! and kernel gradients, plus linear stacks of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::{Image, Shape};
use crate::vecops;

/// One convolution layer; weights are laid out `[out, in, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self { in_channels, out_channels, kernel }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn filter_len(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    #[inline]
    fn index(&self, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + a) * self.kernel + b
    }
}

/// Index range of output rows `i` for which `i + a - pad` is a valid input row.
#[inline]
fn valid_range(a: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(a);
    let hi = (n + pad).saturating_sub(a).min(n);
    (lo, hi.max(lo))
}

/// `out[o,i,j] = sum_{c,a,b} w[o,c,a,b] x[c, i+a-p, j+b-p]`
pub fn conv_forward(spec: &ConvSpec, w: &[f64], x: &Image) -> Image {
    let s = x.shape();
    assert_eq!(s.channels, spec.in_channels, "conv input channels");
    assert_eq!(w.len(), spec.weight_len(), "conv weight length");
    let (h, wd, k) = (s.height, s.width, spec.kernel);
    let pad = k / 2;
    let plane = h * wd;
    let mut out = Image::zeros(s.with_channels(spec.out_channels));
    let xs = x.data();
    let os = out.data_mut();
    for o in 0..spec.out_channels {
        for c in 0..spec.in_channels {
            let xin = &xs[c * plane..(c + 1) * plane];
            for a in 0..k {
                let (i0, i1) = valid_range(a, pad, h);
                for b in 0..k {
                    let wv = w[spec.index(o, c, a, b)];
                    if wv == 0.0 {
                        continue;
                    }
                    let (j0, j1) = valid_range(b, pad, wd);
                    for i in i0..i1 {
                        let src = (i + a - pad) * wd + b;
                        let orow = &mut os[o * plane + i * wd + j0..o * plane + i * wd + j1];
                        let xrow = &xin[src + j0 - pad..src + j1 - pad];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`]: maps `out_channels` back to `in_channels`.
pub fn conv_adjoint(spec: &ConvSpec, w: &[f64], u: &Image) -> Image {
    let s = u.shape();
    assert_eq!(s.channels, spec.out_channels, "adjoint input channels");
    assert_eq!(w.len(), spec.weight_len(), "conv weight length");
    let (h, wd, k) = (s.height, s.width, spec.kernel);
    let pad = k / 2;
    let plane = h * wd;
    let mut out = Image::zeros(s.with_channels(spec.in_channels));
    let us = u.data();
    let os = out.data_mut();
    for o in 0..spec.out_channels {
        let uin = &us[o * plane..(o + 1) * plane];
        for c in 0..spec.in_channels {
            for a in 0..k {
                let (i0, i1) = valid_range(a, pad, h);
                for b in 0..k {
                    let wv = w[spec.index(o, c, a, b)];
                    if wv == 0.0 {
                        continue;
                    }
                    let (j0, j1) = valid_range(b, pad, wd);
                    for i in i0..i1 {
                        let dst = c * plane + (i + a - pad) * wd + b;
                        let orow = &mut os[dst + j0 - pad..dst + j1 - pad];
                        let urow = &uin[i * wd + j0..i * wd + j1];
                        for (ov, uv) in orow.iter_mut().zip(urow) {
                            *ov += wv * uv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates `d/dw <u, conv(w, x)>` into `grad`.
pub fn conv_kernel_grad(spec: &ConvSpec, x: &Image, u: &Image, grad: &mut [f64]) {
    let s = x.shape();
    assert_eq!(s.channels, spec.in_channels);
    assert_eq!(u.shape(), s.with_channels(spec.out_channels));
    assert_eq!(grad.len(), spec.weight_len());
    let (h, wd, k) = (s.height, s.width, spec.kernel);
    let pad = k / 2;
    let plane = h * wd;
    let xs = x.data();
    let us = u.data();
    for o in 0..spec.out_channels {
        let uin = &us[o * plane..(o + 1) * plane];
        for c in 0..spec.in_channels {
            let xin = &xs[c * plane..(c + 1) * plane];
            for a in 0..k {
                let (i0, i1) = valid_range(a, pad, h);
                for b in 0..k {
                    let (j0, j1) = valid_range(b, pad, wd);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let src = (i + a - pad) * wd + b;
                        let urow = &uin[i * wd + j0..i * wd + j1];
                        let xrow = &xin[src + j0 - pad..src + j1 - pad];
                        acc += vecops::dot(urow, xrow);
                    }
                    grad[spec.index(o, c, a, b)] += acc;
                }
            }
        }
    }
}

/// Linear composition of convolution layers `W = W_L ... W_1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvStack {
    pub layers: Vec<ConvSpec>,
}

impl ConvStack {
    /// Channel plan `in -> c_1 -> ... -> c_L` with a shared odd kernel size.
    pub fn new(in_channels: usize, channels: &[usize], kernel: usize) -> Self {
        let mut layers = Vec::with_capacity(channels.len());
        let mut prev = in_channels;
        for &c in channels {
            layers.push(ConvSpec::new(prev, c, kernel));
            prev = c;
        }
        Self { layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Inputs of every layer followed by the final output.
    pub fn forward_all(&self, kernels: &[&[f64]], x: &Image) -> Vec<Image> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (spec, w) in self.layers.iter().zip(kernels) {
            let next = conv_forward(spec, w, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    pub fn forward(&self, kernels: &[&[f64]], x: &Image) -> Image {
        let mut cur = x.clone();
        for (spec, w) in self.layers.iter().zip(kernels) {
            cur = conv_forward(spec, w, &cur);
        }
        cur
    }

    pub fn adjoint(&self, kernels: &[&[f64]], u: &Image) -> Image {
        let mut cur = u.clone();
        for (spec, w) in self.layers.iter().zip(kernels).rev() {
            cur = conv_adjoint(spec, w, &cur);
        }
        cur
    }

    /// Gradient of `<u, W x>` with respect to each layer's kernel, given the
    /// activations from [`Self::forward_all`]. Accumulates into `grads`.
    pub fn kernel_grads(&self, kernels: &[&[f64]], acts: &[Image], u: &Image, grads: &mut [Vec<f64>]) {
        let mut back = u.clone();
        for l in (0..self.layers.len()).rev() {
            conv_kernel_grad(&self.layers[l], &acts[l], &back, &mut grads[l]);
            if l > 0 {
                back = conv_adjoint(&self.layers[l], kernels[l], &back);
            }
        }
    }

    /// Power-iteration estimate of the spectral norm `||W||_2` on inputs of
    /// the given spatial shape. Deterministic for a given `seed`.
    pub fn operator_norm(&self, kernels: &[&[f64]], shape: Shape, iters: usize, seed: u64) -> f64 {
        let shape = shape.with_channels(self.in_channels());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = vecops::norm(&v);
        vecops::scale(1.0 / n, &mut v);
        let mut est = 0.0;
        for _ in 0..iters.max(1) {
            let x = Image::from_vec(shape, v).expect("shape");
            let wx = self.forward(kernels, &x);
            let wtwx = self.adjoint(kernels, &wx);
            // Rayleigh quotient <v, W^T W v> with ||v|| = 1
            est = vecops::norm(wx.data());
            let nn = vecops::norm(wtwx.data());
            if nn == 0.0 {
                return 0.0;
            }
            v = wtwx.into_vec();
            vecops::scale(1.0 / nn, &mut v);
        }
        est
    }
}

//! Reconstruction tasks: forward operators, observations, ground truths,
//! sampling vectors, upper-level losses and image metrics.

mod manifest;
mod pgm;
mod synth;

pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use pgm::{load_pgm, read_pgm, save_pgm, write_pgm, BitDepth};
pub use synth::synth_images;

use rand::distr::Distribution;
use rand_distr::{Bernoulli, Binomial, Normal, Uniform};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::regularizers::{Regularizer, ThetaParams};
use crate::vecops;
use crate::Rng;

pub const DEFAULT_PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Identity,
    Mask,
}

/// One training task: `h(x) = ||A x - y||^2 + R(x) + xi/2 ||x||^2` with
/// upper loss `||x - x_star||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemInstance {
    op_kind: OpKind,
    mask: Option<Image>,
    y: Image,
    x_star: Image,
    xi: f64,
}

impl ProblemInstance {
    pub fn new(op_kind: OpKind, mask: Option<Image>, y: Image, x_star: Image, xi: f64) -> Result<Self> {
        y.ensure_same_shape(&x_star, "ground truth")?;
        match (op_kind, &mask) {
            (OpKind::Identity, None) => {}
            (OpKind::Mask, Some(m)) => {
                y.ensure_same_shape(m, "mask")?;
                if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
                }
            }
            _ => return Err(Error::InvalidArgument("a mask is required exactly for the mask operator".into())),
        }
        if !(xi >= 0.0) || !xi.is_finite() {
            return Err(Error::InvalidArgument(format!("ridge coefficient must be finite and >= 0, got {xi}")));
        }
        Ok(Self { op_kind, mask, y, x_star, xi })
    }

    pub fn denoising(y: Image, x_star: Image) -> Result<Self> {
        Self::new(OpKind::Identity, None, y, x_star, 0.0)
    }

    pub fn op_kind(&self) -> OpKind {
        self.op_kind
    }

    pub fn mask(&self) -> Option<&Image> {
        self.mask.as_ref()
    }

    pub fn y(&self) -> &Image {
        &self.y
    }

    pub fn x_star(&self) -> &Image {
        &self.x_star
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn shape(&self) -> Shape {
        self.y.shape()
    }

    /// `A x`; the operator is diagonal so it is also `A^T x`.
    pub fn apply_a(&self, x: &Image) -> Result<Image> {
        self.y.ensure_same_shape(x, "operator input")?;
        Ok(match &self.mask {
            None => x.clone(),
            Some(m) => x.like(x.data().iter().zip(m.data()).map(|(a, b)| a * b).collect())?,
        })
    }

    pub fn apply_at(&self, u: &Image) -> Result<Image> {
        self.apply_a(u)
    }

    /// Smallest diagonal entry of `A^T A`.
    pub fn min_ata(&self) -> f64 {
        match &self.mask {
            None => 1.0,
            Some(m) => m.data().iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// `||A x - y||^2`
    pub fn fidelity(&self, x: &Image) -> Result<f64> {
        let ax = self.apply_a(x)?;
        Ok(ax.data().iter().zip(self.y.data()).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// Lower bound on the strong convexity modulus of `h`.
pub fn strong_convexity_floor(inst: &ProblemInstance, reg: &dyn Regularizer, theta: &ThetaParams) -> Result<f64> {
    let mu = 2.0 * inst.min_ata() + inst.xi + reg.strong_convexity(theta);
    if !(mu > 0.0) {
        return Err(Error::Inadmissible(format!(
            "lower-level problem is not strongly convex (mu = {mu}); add a ridge term"
        )));
    }
    Ok(mu)
}

fn check_images(images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image list".into()));
    }
    Ok(())
}

fn noise(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise level {sigma}: {e}")))
}

/// Additive Gaussian denoising tasks, one per image.
pub fn make_denoising(images: &[Image], sigma: f64, rng: &mut Rng) -> Result<Vec<ProblemInstance>> {
    check_images(images)?;
    let n = noise(sigma)?;
    images
        .iter()
        .map(|x| {
            let y = x.like(x.data().iter().map(|v| v + n.sample(rng)).collect())?;
            ProblemInstance::denoising(y, x.clone())
        })
        .collect()
}

/// Random-mask inpainting: pixels are kept with probability `keep_prob`,
/// noise is added to kept pixels and removed pixels read zero.
pub fn make_inpainting(
    images: &[Image],
    keep_prob: f64,
    sigma: f64,
    xi: f64,
    rng: &mut Rng,
) -> Result<Vec<ProblemInstance>> {
    check_images(images)?;
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep probability must lie in (0, 1], got {keep_prob}")));
    }
    let keep = Bernoulli::new(keep_prob).expect("checked range");
    let n = noise(sigma)?;
    images
        .iter()
        .map(|x| {
            let mask: Vec<f64> = (0..x.len()).map(|_| if keep.sample(rng) { 1.0 } else { 0.0 }).collect();
            let y: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| m * (v + n.sample(rng))).collect();
            ProblemInstance::new(OpKind::Mask, Some(x.like(mask)?), x.like(y)?, x.clone(), xi)
        })
        .collect()
}

/// Quadratic-toy family: `m` denoising tasks of dimension `dim` whose targets
/// are shrunk observations, `x*_i = c_i y_i + noise`, so the optimal
/// log-scale is finite. Pair with [`crate::regularizers::QuadToy`].
pub fn make_toy_family(m: usize, dim: usize, rng: &mut Rng) -> Result<Vec<ProblemInstance>> {
    if m == 0 || dim == 0 {
        return Err(Error::InvalidArgument("toy family needs m >= 1 and dim >= 1".into()));
    }
    let obs = Uniform::new(0.5, 1.5).expect("valid range");
    let shrink = Uniform::new(0.3, 0.7).expect("valid range");
    let jitter = Normal::new(0.0, 0.05).expect("valid std");
    let shape = Shape::new(1, 1, dim);
    (0..m)
        .map(|_| {
            let c = shrink.sample(rng);
            let y: Vec<f64> = (0..dim).map(|_| obs.sample(rng)).collect();
            let x: Vec<f64> = y.iter().map(|v| c * v + jitter.sample(rng)).collect();
            ProblemInstance::denoising(Image::from_vec(shape, y)?, Image::from_vec(shape, x)?)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Independent `v_i ~ Binomial(m, 1/m)`.
    Binomial,
    /// Uniform `b`-subset with weights `m/b`.
    MinibatchScaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingVector {
    pub weights: Vec<f64>,
    pub mode: SamplingMode,
}

impl SamplingVector {
    /// `v = 1`: the full-batch objective.
    pub fn full(m: usize) -> Self {
        Self { weights: vec![1.0; m], mode: SamplingMode::MinibatchScaled }
    }

    pub fn nonzeros(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

pub fn sample_v(m: usize, mode: SamplingMode, b: usize, rng: &mut Rng) -> Result<SamplingVector> {
    if m == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one task".into()));
    }
    let weights = match mode {
        SamplingMode::Binomial => {
            let dist = Binomial::new(m as u64, 1.0 / m as f64).expect("valid probability");
            (0..m).map(|_| dist.sample(rng) as f64).collect()
        }
        SamplingMode::MinibatchScaled => {
            if b == 0 || b > m {
                return Err(Error::InvalidArgument(format!("batch size {b} must lie in 1..={m}")));
            }
            let mut w = vec![0.0; m];
            for i in rand::seq::index::sample(rng, m, b) {
                w[i] = m as f64 / b as f64;
            }
            w
        }
    };
    Ok(SamplingVector { weights, mode })
}

/// `g(x) = ||x - x*||^2`
pub fn upper_loss(x: &Image, inst: &ProblemInstance) -> Result<f64> {
    x.ensure_same_shape(&inst.x_star, "upper-level input")?;
    Ok(x.data().iter().zip(inst.x_star.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn upper_grad(x: &Image, inst: &ProblemInstance) -> Result<Image> {
    x.ensure_same_shape(&inst.x_star, "upper-level input")?;
    x.like(x.data().iter().zip(inst.x_star.data()).map(|(a, b)| 2.0 * (a - b)).collect())
}

/// Peak signal-to-noise ratio in dB, capped at [`DEFAULT_PSNR_CAP`].
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    psnr_capped(x, reference, peak, DEFAULT_PSNR_CAP)
}

pub fn psnr_capped(x: &Image, reference: &Image, peak: f64, cap: f64) -> Result<f64> {
    x.ensure_same_shape(reference, "PSNR reference")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = vecops::dist(x.data(), reference.data()).powi(2) / x.len() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

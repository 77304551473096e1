//! Parametric convex regularizers `R_theta(x)` and their parameter vectors.
//!
//! Every regularizer exposes its value, the gradient and Hessian-vector
//! product in `x`, and the mixed derivative `grad_theta <grad_x R(x, theta), q>`
//! needed by implicit differentiation.

mod checkpoint;
mod crr;
mod icnn;
mod potential;
mod quad;

use std::fmt;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use crr::{spectral_normalize, Crr, NormalizeOutcome};
pub use icnn::{smoothed_relu, Icnn};
pub use potential::{Potential, PotentialKind};
pub use quad::{QuadToy, ZeroRegularizer};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self { name: name.into(), shape }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered named tensor shapes describing a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(tensors: Vec<TensorSpec>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(TensorSpec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.tensors[..index].iter().map(TensorSpec::len).sum();
        start..start + self.tensors[index].len()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    flat: Vec<f64>,
    layout: Layout,
}

impl ThetaParams {
    pub fn new(layout: Layout, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a layout of {}",
                flat.len(),
                layout.len()
            )));
        }
        Ok(Self { flat, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.len();
        Self { flat: vec![0.0; n], layout }
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let i = self.layout.position(name)?;
        Some(&self.flat[self.layout.range(i)])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.layout.position(name)?;
        let r = self.layout.range(i);
        Some(&mut self.flat[r])
    }

    /// Same layout, new values.
    pub fn with_flat(&self, flat: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), flat)
    }

    pub fn unpack(&self) -> Vec<NamedTensor> {
        self.layout
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: self.flat[self.layout.range(i)].to_vec(),
            })
            .collect()
    }

    pub fn pack(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut specs = Vec::with_capacity(tensors.len());
        let mut flat = Vec::new();
        for t in tensors {
            let spec = TensorSpec::new(t.name, t.shape);
            if spec.len() != t.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    spec.name,
                    t.values.len(),
                    spec.shape
                )));
            }
            flat.extend_from_slice(&t.values);
            specs.push(spec);
        }
        Self::new(Layout::new(specs), flat)
    }

    pub fn ensure_layout(&self, layout: &Layout) -> Result<()> {
        if &self.layout != layout {
            return Err(Error::ShapeMismatch("parameter layout does not match the regularizer".into()));
        }
        Ok(())
    }
}

/// Sets negative entries of the masked tensors to zero; other tensors are untouched.
pub fn clamp_nonneg(theta: &mut ThetaParams, mask: &[bool]) {
    let ranges: Vec<_> = (0..theta.layout.tensors().len())
        .filter(|&i| mask.get(i).copied().unwrap_or(false))
        .map(|i| theta.layout.range(i))
        .collect();
    for r in ranges {
        for v in &mut theta.flat[r] {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Local bounds on the mixed derivative `J = grad^2_{theta x} h` and the
/// Hessian around a reference point, used by the hypergradient error model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianConstants {
    /// Lipschitz constant of `grad^2_xx h` in `x`.
    pub l_hessian: f64,
    /// Lipschitz constant of `J` in `x`.
    pub l_jacobian: f64,
    /// Bound on `||J||` in the neighbourhood.
    pub j_max: f64,
}

pub trait Regularizer: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn layout(&self) -> Layout;

    /// Per-tensor flags for parameters constrained to be non-negative.
    fn nonneg_mask(&self) -> Vec<bool> {
        vec![false; self.layout().tensors().len()]
    }

    fn init_params(&self, shape: Shape, rng: &mut Rng) -> Result<ThetaParams>;

    fn value(&self, x: &Image, theta: &ThetaParams) -> Result<f64>;

    fn grad_x(&self, x: &Image, theta: &ThetaParams) -> Result<Image>;

    fn hvp_x(&self, x: &Image, theta: &ThetaParams, v: &Image) -> Result<Image>;

    /// `grad_theta <grad_x R(x, theta), q>` at fixed `x`.
    fn mixed_jvp(&self, x: &Image, theta: &ThetaParams, q: &Image) -> Result<Vec<f64>>;

    /// Lower bound on the smallest eigenvalue of `grad^2_xx R`.
    fn strong_convexity(&self, _theta: &ThetaParams) -> f64 {
        0.0
    }

    /// Constraint enforcement after an upper-level step.
    fn project(&self, theta: &mut ThetaParams, _shape: Shape) -> Result<()> {
        clamp_nonneg(theta, &self.nonneg_mask());
        Ok(())
    }

    /// Exact local constants when the regularizer can provide them.
    fn jacobian_constants(&self, _x_ref: &Image, _radius: f64, _theta: &ThetaParams) -> Option<JacobianConstants> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Layout {
        Layout::new(vec![TensorSpec::new("a", vec![2, 3]), TensorSpec::new("b", vec![4])])
    }

    #[test]
    fn ranges_and_lookup() {
        let l = layout();
        assert_eq!(l.len(), 10);
        assert_eq!(l.range(1), 6..10);
        let mut t = ThetaParams::zeros(l);
        t.tensor_mut("b").unwrap()[0] = 2.0;
        assert_eq!(t.flat()[6], 2.0);
        assert!(t.tensor("c").is_none());
        assert!(ThetaParams::new(layout(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn clamp_examples() {
        let mut t = ThetaParams::new(layout(), vec![-1.0, 2.0, 0.5, 1.0, 1.0, 1.0, -3.0, 0.0, 4.0, -0.5]).unwrap();
        let original = t.clone();
        clamp_nonneg(&mut t, &[false, true]);
        assert_eq!(&t.flat()[..6], &original.flat()[..6]);
        assert_eq!(t.tensor("b").unwrap(), &[0.0, 0.0, 4.0, 0.0]);
        let once = t.clone();
        clamp_nonneg(&mut t, &[false, true]);
        assert_eq!(t, once);
        let mut positive = ThetaParams::new(layout(), vec![1.0; 10]).unwrap();
        clamp_nonneg(&mut positive, &[true, true]);
        assert_eq!(positive.flat(), &[1.0; 10]);
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let t = ThetaParams::new(layout(), values).unwrap();
            let back = ThetaParams::pack(t.unpack()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

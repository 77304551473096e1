use super::{JacobianConstants, Layout, Regularizer, TensorSpec, ThetaParams};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::vecops;
use crate::Rng;

/// `R_s(x) = e^s ||x||^2` with scalar `theta = s`; an oracle problem with a
/// closed-form lower-level solution.
#[derive(Clone, Debug, Default)]
pub struct QuadToy {
    pub init_log_scale: f64,
}

impl QuadToy {
    pub fn new(init_log_scale: f64) -> Self {
        Self { init_log_scale }
    }

    fn scale(theta: &ThetaParams) -> Result<f64> {
        match theta.flat() {
            [s] => Ok(s.exp()),
            other => Err(Error::ShapeMismatch(format!("quadratic toy expects 1 parameter, got {}", other.len()))),
        }
    }
}

impl Regularizer for QuadToy {
    fn name(&self) -> &'static str {
        "quad"
    }

    fn layout(&self) -> Layout {
        Layout::new(vec![TensorSpec::new("log_scale", vec![1])])
    }

    fn init_params(&self, _shape: Shape, _rng: &mut Rng) -> Result<ThetaParams> {
        ThetaParams::new(self.layout(), vec![self.init_log_scale])
    }

    fn value(&self, x: &Image, theta: &ThetaParams) -> Result<f64> {
        Ok(Self::scale(theta)? * vecops::dot(x.data(), x.data()))
    }

    fn grad_x(&self, x: &Image, theta: &ThetaParams) -> Result<Image> {
        let c = 2.0 * Self::scale(theta)?;
        x.like(x.data().iter().map(|v| c * v).collect())
    }

    fn hvp_x(&self, x: &Image, theta: &ThetaParams, v: &Image) -> Result<Image> {
        x.ensure_same_shape(v, "hvp direction")?;
        let c = 2.0 * Self::scale(theta)?;
        v.like(v.data().iter().map(|t| c * t).collect())
    }

    fn mixed_jvp(&self, x: &Image, theta: &ThetaParams, q: &Image) -> Result<Vec<f64>> {
        x.ensure_same_shape(q, "mixed jvp direction")?;
        Ok(vec![2.0 * Self::scale(theta)? * vecops::dot(x.data(), q.data())])
    }

    fn strong_convexity(&self, theta: &ThetaParams) -> f64 {
        2.0 * theta.flat().first().map_or(0.0, |s| s.exp())
    }

    fn jacobian_constants(&self, x_ref: &Image, radius: f64, theta: &ThetaParams) -> Option<JacobianConstants> {
        let c = 2.0 * Self::scale(theta).ok()?;
        Some(JacobianConstants {
            l_hessian: 0.0,
            l_jacobian: c,
            j_max: c * (vecops::norm(x_ref.data()) + radius),
        })
    }
}

/// `R = 0`, no parameters.
#[derive(Clone, Debug, Default)]
pub struct ZeroRegularizer;

impl Regularizer for ZeroRegularizer {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn layout(&self) -> Layout {
        Layout::default()
    }

    fn init_params(&self, _shape: Shape, _rng: &mut Rng) -> Result<ThetaParams> {
        Ok(ThetaParams::zeros(self.layout()))
    }

    fn value(&self, _x: &Image, _theta: &ThetaParams) -> Result<f64> {
        Ok(0.0)
    }

    fn grad_x(&self, x: &Image, _theta: &ThetaParams) -> Result<Image> {
        Ok(Image::zeros(x.shape()))
    }

    fn hvp_x(&self, x: &Image, _theta: &ThetaParams, v: &Image) -> Result<Image> {
        x.ensure_same_shape(v, "hvp direction")?;
        Ok(Image::zeros(x.shape()))
    }

    fn mixed_jvp(&self, x: &Image, _theta: &ThetaParams, q: &Image) -> Result<Vec<f64>> {
        x.ensure_same_shape(q, "mixed jvp direction")?;
        Ok(Vec::new())
    }

    fn jacobian_constants(&self, _x_ref: &Image, _radius: f64, _theta: &ThetaParams) -> Option<JacobianConstants> {
        Some(JacobianConstants { l_hessian: 0.0, l_jacobian: 0.0, j_max: 0.0 })
    }
}

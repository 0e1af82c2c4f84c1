//! Parameter bundles for the layers used across the model.

use ddatr_tensor::{ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`, for layers followed by relu.
    He,
    /// Normal with std `sqrt(1 / fan_in)`.
    Lecun,
    Zero,
}

impl Init {
    fn tensor<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::He => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::Lecun => Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(shape),
        }
    }
}

/// `k×k` convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init.tensor(&[c_out, c_in, k, k], c_in * k * k, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        Ok(x.conv2d(&g.param(self.w), Some(&g.param(self.b)), self.stride, self.padding)?)
    }
}

/// Channel-mixing 1×1 convolution over `[C_in, ...]`.
#[derive(Clone, Copy, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Pointwise {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init.tensor(&[c_out, c_in], c_in, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        Ok(x.conv1x1(&g.param(self.w), &g.param(self.b))?)
    }

    /// Row-wise map of `[N, C_in]` to `[N, C_out]`.
    pub fn rows<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        Ok(x.linear(&g.param(self.w), &g.param(self.b))?)
    }
}

/// Per-channel affine after normalization.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    /// Instance normalization of `[C, spatial...]`.
    pub fn instance<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        Ok(x.instance_norm(&g.param(self.gamma), &g.param(self.beta), NORM_EPS)?)
    }

    /// Normalization of a whole `[C, spatial...]` map with one mean and
    /// variance, then the per-channel affine. Channel magnitudes relative to
    /// each other survive.
    pub fn joint<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let shape = x.shape();
        let mut affine = vec![1; shape.len()];
        affine[0] = shape[0];
        let n: usize = shape.iter().product();
        let normed = x.reshape(&[1, n])?.standardize(NORM_EPS)?.reshape(&shape)?;
        Ok(normed
            .mul(&g.param(self.gamma).reshape(&affine)?)?
            .add(&g.param(self.beta).reshape(&affine)?)?)
    }

    /// Layer normalization of `[N, C]` rows.
    pub fn layer<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        Ok(x.layer_norm(&g.param(self.gamma), &g.param(self.beta), NORM_EPS)?)
    }
}

/// Two-block gate `tanh(B2(relu(B1(x))))` with a zero-initialized `B2`.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub b1: Pointwise,
    pub b2: Pointwise,
}

impl Gate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            b1: Pointwise::new(store, &format!("{name}.b1"), c, c, Init::He, rng),
            b2: Pointwise::new(store, &format!("{name}.b2"), c, c, Init::Zero, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.b2.forward(self.b1.forward(x)?.relu()?)?.tanh()?)
    }
}

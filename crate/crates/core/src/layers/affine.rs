//! Fully connected layer with optional ReLU, plus its exact backward pass.

use crate::error::{Error, Result};
use crate::tensor::{relu, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "none",
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Linear),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }
}

/// weight is in_dim x out_dim, bias is 1 x out_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer<F = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub activation: Activation,
}

impl<F: Scalar> AffineLayer<F> {
    pub fn new(weight: Tensor<F>, bias: Tensor<F>, activation: Activation) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Shape(format!(
                "affine bias must be 1x{}, got {}x{}",
                weight.cols(),
                bias.rows(),
                bias.cols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(in_dim, out_dim),
            bias: Tensor::zeros(1, out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn to_precision<G: Scalar>(&self) -> AffineLayer<G> {
        AffineLayer {
            weight: self.weight.to_precision(),
            bias: self.bias.to_precision(),
            activation: self.activation,
        }
    }
}

/// What the backward pass needs: the input and the pre-activation.
#[derive(Debug, Clone)]
pub struct AffineCache<F = f32> {
    x: Tensor<F>,
    pre: Tensor<F>,
}

/// y = act(x W + bias), broadcast per row.
pub fn affine_forward<F: Scalar>(
    layer: &AffineLayer<F>,
    x: &Tensor<F>,
) -> Result<(Tensor<F>, AffineCache<F>)> {
    if x.cols() != layer.in_dim() {
        return Err(Error::Shape(format!(
            "affine expected input width {}, got {}x{}",
            layer.in_dim(),
            x.rows(),
            x.cols()
        )));
    }
    let pre = x.matmul(&layer.weight)?.add_row_vector(&layer.bias)?;
    let y = match layer.activation {
        Activation::Relu => relu(&pre),
        Activation::Linear => pre.clone(),
    };
    Ok((
        y,
        AffineCache {
            x: x.clone(),
            pre,
        },
    ))
}

/// Exact gradients of the forward map: returns (grad_x, grad_weight,
/// grad_bias).
pub fn affine_backward<F: Scalar>(
    layer: &AffineLayer<F>,
    cache: &AffineCache<F>,
    grad_y: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if grad_y.shape() != cache.pre.shape() {
        return Err(Error::Shape(format!(
            "affine backward expected grad {}x{}, got {}x{}",
            cache.pre.rows(),
            cache.pre.cols(),
            grad_y.rows(),
            grad_y.cols()
        )));
    }
    let grad_pre = match layer.activation {
        Activation::Relu => grad_y.zip_map(&cache.pre, |g, z| {
            if z > F::zero() {
                g
            } else {
                F::zero()
            }
        })?,
        Activation::Linear => grad_y.clone(),
    };
    let grad_weight = cache.x.matmul_at_b(&grad_pre)?;
    let grad_bias = grad_pre.col_sums();
    let grad_x = grad_pre.matmul_a_bt(&layer.weight)?;
    Ok((grad_x, grad_weight, grad_bias))
}

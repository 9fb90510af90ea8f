//! Building blocks shared by the backbone and the decoder.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Init, Param, ParamRole, ParamStore};
use crate::error::{Error, Result};

/// Everything a layer constructor needs to register parameters.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub bitfit: bool,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn param(
        &mut self,
        name: &str,
        role: ParamRole,
        shape: &[usize],
        init: Init,
    ) -> Result<Param> {
        self.store
            .init(name, role, shape, init, self.bitfit, self.rng)
    }
}

/// Which normalization the decoder and detail blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormKind {
    /// Batch statistics in training, running statistics in evaluation.
    #[default]
    Batch,
    /// Per-sample group statistics; usable at batch size 1.
    Group { groups: usize },
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Option<Param>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = b.param(
            &format!("{name}.weight"),
            ParamRole::DecoderWeight,
            &[c_out, c_in, kernel, kernel],
            Init::FanInUniform(fan_in),
        )?;
        let bias = if bias {
            Some(b.param(
                &format!("{name}.bias"),
                ParamRole::DecoderBias,
                &[c_out],
                Init::FanInUniform(fan_in),
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.t();
        let y = if k.dim(2)? == 1 && self.stride == 1 && self.padding == 0 {
            pointwise(x, &k)?
        } else {
            x.conv2d(&k, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.t().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// 1x1 convolution as a batched matrix product.
fn pointwise(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let c_out = k.dim(0)?;
    let k = k.reshape((c_out, c))?;
    let y = k.broadcast_matmul(&x.reshape((n, c, h * w))?)?;
    Ok(y.reshape((n, c_out, h, w))?)
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: b.param(
                &format!("{name}.weight"),
                ParamRole::DecoderNorm,
                &[channels],
                Init::Ones,
            )?,
            beta: b.param(
                &format!("{name}.bias"),
                ParamRole::DecoderNorm,
                &[channels],
                Init::Zeros,
            )?,
            running_mean: b.param(
                &format!("{name}.running_mean"),
                ParamRole::RunningStat,
                &[channels],
                Init::Zeros,
            )?,
            running_var: b.param(
                &format!("{name}.running_var"),
                ParamRole::RunningStat,
                &[channels],
                Init::Ones,
            )?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let m = (n * h * w) as f64;
            let mean = (x.sum_keepdim((0, 2, 3))? / m)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = (centered.sqr()?.sum_keepdim((0, 2, 3))? / m)?;
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = self.momentum;
            let new_mean =
                ((self.running_mean.t() * (1.0 - mom))? + (mean.detach().reshape(c)? * mom)?)?;
            let new_var = ((self.running_var.t() * (1.0 - mom))?
                + (var.detach().reshape(c)? * (mom * unbiased))?)?;
            self.running_mean.assign(&new_mean)?;
            self.running_var.assign(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.t().reshape((1, c, 1, 1))?,
                self.running_var.t().reshape((1, c, 1, 1))?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = inv.broadcast_mul(&self.gamma.t().reshape((1, c, 1, 1))?)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.beta.t().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Param,
    beta: Param,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{channels} channels cannot form {groups} groups"
            )));
        }
        Ok(GroupNorm {
            gamma: b.param(
                &format!("{name}.weight"),
                ParamRole::DecoderNorm,
                &[channels],
                Init::Ones,
            )?,
            beta: b.param(
                &format!("{name}.bias"),
                ParamRole::DecoderNorm,
                &[channels],
                Init::Zeros,
            )?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let y = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        let y = y.broadcast_mul(&self.gamma.t().reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&self.beta.t().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Batch(BatchNorm2d),
    Group(GroupNorm),
}

impl Norm {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        channels: usize,
        kind: NormKind,
    ) -> Result<Self> {
        Ok(match kind {
            NormKind::Batch => Norm::Batch(BatchNorm2d::new(b, name, channels)?),
            NormKind::Group { groups } => {
                Norm::Group(GroupNorm::new(b, name, channels, groups.min(channels))?)
            }
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Norm::Batch(bn) => bn.forward(x, train),
            Norm::Group(gn) => gn.forward(x),
        }
    }
}

/// Convolution without bias, normalization, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: Conv2d,
    norm: Norm,
    relu: bool,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        norm: NormKind,
        relu: bool,
    ) -> Result<Self> {
        Ok(ConvNormAct {
            conv: Conv2d::new(
                b,
                &format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                stride,
                kernel / 2,
                false,
            )?,
            norm: Norm::new(b, &format!("{name}.norm"), c_out, norm)?,
            relu,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?, train)?;
        if self.relu {
            Ok(y.relu()?)
        } else {
            Ok(y)
        }
    }
}

/// Dense layer over the last axis of `(..., in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Param,
}

impl Linear {
    pub fn from_params(weight: Param, bias: Param) -> Self {
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims
            .last()
            .ok_or_else(|| Error::shape("linear input has no axes"))?;
        let rows = x.elem_count() / d_in;
        let w = self.weight.t();
        let y = x
            .reshape((rows, d_in))?
            .matmul(&w.t()?)?
            .broadcast_add(&self.bias.t())?;
        let mut out = dims;
        *out.last_mut().unwrap() = w.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn from_params(weight: Param, bias: Param, eps: f64) -> Self {
        LayerNorm { weight, bias, eps }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight.t())?
            .broadcast_add(&self.bias.t())?)
    }
}

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, conv_transpose2d, param};
use super::params::ParamBuilder;
use crate::error::{Error, Result};

const INSTANCE_NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Instance,
    None,
}

impl Norm {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Instance => instance_norm(x),
            Norm::None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Reflect,
    Zero,
}

/// 2-D convolution with bias. Weight layout is `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
    padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Self> {
        let k2 = kernel * kernel;
        let (weight, bias) = b.conv(name, [c_out, c_in, kernel, kernel], c_in * k2, c_out * k2, c_out)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.padding {
            Padding::Reflect => conv2d(&reflect_pad(x, self.pad)?, &param(&self.weight), 0, self.stride)?,
            Padding::Zero => conv2d(x, &param(&self.weight), self.pad, self.stride)?,
        };
        add_channel_bias(&y, &param(&self.bias))
    }
}

/// Stride-2 transpose convolution (kernel 3, padding 1, output padding 1) that
/// doubles the spatial size. Weight layout is `(in, out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
}

impl ConvTranspose2d {
    pub(crate) fn build(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let (weight, bias) = b.conv(name, [c_in, c_out, 3, 3], c_in * 9, c_out * 9, c_out)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &param(&self.weight), 2, 1, 1)?;
        add_channel_bias(&y, &param(&self.bias))
    }
}

fn add_channel_bias(y: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dims()[0];
    Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Mirror padding that excludes the edge pixel, on both spatial axes.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(Error::invalid(format!(
            "reflection padding of {pad} needs spatial size > {pad}, got {h}x{w}"
        )));
    }
    let x = x.index_select(&reflect_indices(w, pad, x.device())?, 3)?;
    Ok(x.index_select(&reflect_indices(h, pad, x.device())?, 2)?)
}

fn reflect_indices(n: usize, pad: usize, device: &candle_core::Device) -> Result<Tensor> {
    let idx: Vec<u32> = (1..=pad)
        .rev()
        .chain(0..n)
        .chain((n - 1 - pad..n - 1).rev())
        .map(|i| i as u32)
        .collect();
    Ok(Tensor::new(idx, device)?)
}

/// Per-sample, per-channel normalization over the spatial axes (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((n, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * LEAKY_SLOPE)?)?)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Nearest-neighbor 2x upsampling followed by a stride-1 "same" convolution.
///
/// `weight` is `(out, in, k, k)` with odd `k`; borders are zero padded.
pub fn resize_conv_block(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, _, k, k2) = weight.dims4()?;
    if k != k2 || k % 2 == 0 {
        return Err(Error::invalid(format!(
            "resize convolution needs a square odd kernel, got {k}x{k2}"
        )));
    }
    let y = conv2d(&upsample_nearest2x(input)?, weight, k / 2, 1)?;
    match bias {
        Some(b) => add_channel_bias(&y, b),
        None => Ok(y),
    }
}

/// `[reflect pad, conv3, norm, relu, reflect pad, conv3, norm]` plus the skip connection.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    norm: Norm,
}

impl ResidualBlock {
    pub(crate) fn build(b: &mut ParamBuilder, name: &str, channels: usize, norm: Norm) -> Result<Self> {
        let conv1 = Conv2d::build(b, &format!("{name}.conv1"), channels, channels, 3, 1, 1, Padding::Reflect)?;
        let conv2 = Conv2d::build(b, &format!("{name}.conv2"), channels, channels, 3, 1, 1, Padding::Reflect)?;
        Ok(Self { conv1, conv2, norm })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.apply(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm.apply(&self.conv2.forward(&y)?)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Nearest-neighbor resize followed by a stride-1 convolution.
    #[default]
    NearestNeighborConv,
    /// Stride-2 transpose convolution.
    TransposeConv,
}

/// One 2x upsampling stage of a decoder, before normalization and activation.
#[derive(Debug, Clone)]
pub enum Upsample {
    Resize(Conv2d),
    Transpose(ConvTranspose2d),
}

impl Upsample {
    pub(crate) fn build(
        b: &mut ParamBuilder,
        name: &str,
        mode: UpsampleMode,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(match mode {
            UpsampleMode::NearestNeighborConv => {
                Upsample::Resize(Conv2d::build(b, name, c_in, c_out, 3, 1, 1, Padding::Reflect)?)
            }
            UpsampleMode::TransposeConv => Upsample::Transpose(ConvTranspose2d::build(b, name, c_in, c_out)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Upsample::Resize(conv) => conv.forward(&upsample_nearest2x(x)?),
            Upsample::Transpose(conv) => conv.forward(x),
        }
    }
}

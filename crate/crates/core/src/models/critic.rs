use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, Conv2d, Norm, Padding};
use super::params::{ParamBuilder, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{ensure_image_batch, CHANNELS};

/// Architecture of a fully convolutional critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub base_width: usize,
    /// Number of stride-2 4x4 convolution stages.
    pub n_layers: usize,
    pub norm: Norm,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            base_width: 64,
            n_layers: 4,
            norm: Norm::Instance,
        }
    }
}

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.n_layers == 0 || self.n_layers > 8 {
            return Err(Error::invalid(format!("invalid critic spec: {self:?}")));
        }
        Ok(())
    }

    /// Smallest spatial size that leaves a non-empty score map.
    pub fn min_size(&self) -> usize {
        // each stage floors the size by 2; the 4x4 stride-1 head removes one more pixel
        1 << (self.n_layers + 1)
    }

    fn stage_width(&self, i: usize) -> usize {
        self.base_width << i.min(3)
    }
}

/// Maps an image batch to one unbounded score per sample (spatial mean of the score map).
#[derive(Debug, Clone)]
pub struct Critic {
    spec: CriticSpec,
    params: ParameterSet,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

/// Builds an `f32` critic on the CPU.
pub fn build_critic(spec: &CriticSpec, seed: u64) -> Result<Critic> {
    Critic::build(spec, seed, DType::F32, &Device::Cpu)
}

impl Critic {
    pub fn build(spec: &CriticSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder::new(seed, dtype, device);
        let mut c_in = CHANNELS;
        let mut stages = Vec::with_capacity(spec.n_layers);
        for i in 0..spec.n_layers {
            let c_out = spec.stage_width(i);
            stages.push(Conv2d::build(&mut b, &format!("stage{i}"), c_in, c_out, 4, 2, 1, Padding::Zero)?);
            c_in = c_out;
        }
        let head = Conv2d::build(&mut b, "head", c_in, 1, 4, 1, 1, Padding::Zero)?;
        Ok(Self {
            spec: *spec,
            params: b.finish(),
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Per-pixel score map of shape `(batch, 1, h', w')`.
    pub fn score_map(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = ensure_image_batch(x, "critic input")?;
        if c != CHANNELS {
            return Err(Error::invalid(format!("critic expects {CHANNELS} channels, got {c}")));
        }
        let min = self.spec.min_size();
        if h < min || w < min {
            return Err(Error::invalid(format!(
                "critic input {h}x{w} is smaller than its receptive minimum {min}x{min}"
            )));
        }
        let mut y = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.forward(&y)?;
            if i > 0 {
                y = self.spec.norm.apply(&y)?;
            }
            y = leaky_relu(&y)?;
        }
        self.head.forward(&y)
    }

    /// Scores of shape `(batch,)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.score_map(x)?.flatten_from(1)?.mean(1)?)
    }
}

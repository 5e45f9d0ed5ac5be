use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Norm, Padding, ResidualBlock, Upsample, UpsampleMode};
use super::params::{ParamBuilder, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::{ensure_image_batch, CHANNELS};

/// Architecture of an encoder / residual transformer / decoder generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_width: usize,
    pub n_residual_blocks: usize,
    /// Number of stride-2 encoder stages; the decoder mirrors them.
    pub n_down: usize,
    pub upsample_mode: UpsampleMode,
    pub norm: Norm,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base_width: 64,
            n_residual_blocks: 9,
            n_down: 2,
            upsample_mode: UpsampleMode::NearestNeighborConv,
            norm: Norm::Instance,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.n_residual_blocks == 0 || self.n_down == 0 {
            return Err(Error::invalid(format!(
                "generator widths and counts must be positive: {self:?}"
            )));
        }
        if self.n_down > 8 {
            return Err(Error::invalid(format!("n_down = {} is unreasonably deep", self.n_down)));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.n_down
    }

    /// Smallest accepted spatial size: the bottleneck must be at least 2 pixels
    /// wide for reflection padding, and the 7x7 stem needs more than 3.
    pub fn min_size(&self) -> usize {
        (2 * self.size_multiple()).max(4)
    }

    /// Checks that an `h x w` input is accepted.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h < self.min_size() || w < self.min_size() {
            return Err(Error::invalid(format!(
                "generator input {h}x{w} is invalid: height and width must be multiples of {m} \
                 (2^n_down) and at least {}",
                self.min_size()
            )));
        }
        Ok(())
    }
}

/// Image-to-image generator with `tanh` output in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    params: ParameterSet,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<ResidualBlock>,
    up: Vec<Upsample>,
    head: Conv2d,
}

/// Builds an `f32` generator on the CPU.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator> {
    Generator::build(spec, seed, DType::F32, &Device::Cpu)
}

impl Generator {
    pub fn build(spec: &GeneratorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder::new(seed, dtype, device);
        let w = spec.base_width;
        let stem = Conv2d::build(&mut b, "stem", CHANNELS, w, 7, 1, 3, Padding::Reflect)?;

        let mut width = w;
        let mut down = Vec::with_capacity(spec.n_down);
        for i in 0..spec.n_down {
            down.push(Conv2d::build(&mut b, &format!("down{i}"), width, width * 2, 3, 2, 1, Padding::Reflect)?);
            width *= 2;
        }

        let blocks = (0..spec.n_residual_blocks)
            .map(|i| ResidualBlock::build(&mut b, &format!("res{i}"), width, spec.norm))
            .collect::<Result<Vec<_>>>()?;

        let mut up = Vec::with_capacity(spec.n_down);
        for i in 0..spec.n_down {
            up.push(Upsample::build(&mut b, &format!("up{i}"), spec.upsample_mode, width, width / 2)?);
            width /= 2;
        }

        let head = Conv2d::build(&mut b, "head", width, CHANNELS, 7, 1, 3, Padding::Reflect)?;
        Ok(Self {
            spec: *spec,
            params: b.finish(),
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = ensure_image_batch(x, "generator input")?;
        if c != CHANNELS {
            return Err(Error::invalid(format!("generator expects {CHANNELS} channels, got {c}")));
        }
        self.spec.check_size(h, w)?;
        let norm = self.spec.norm;

        let mut y = norm.apply(&self.stem.forward(x)?)?.relu()?;
        for conv in &self.down {
            y = norm.apply(&conv.forward(&y)?)?.relu()?;
        }
        for block in &self.blocks {
            y = block.forward(&y)?;
        }
        for stage in &self.up {
            y = norm.apply(&stage.forward(&y)?)?.relu()?;
        }
        Ok(self.head.forward(&y)?.tanh()?)
    }

    /// Forward pass for inference: no graph is kept, the result is detached.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::no_grad(|| self.forward(&x.detach()))?.detach())
    }
}

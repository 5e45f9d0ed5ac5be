//! Generators, critics and their building blocks.

mod conv;
mod critic;
mod generator;
mod init;
mod layers;
pub(crate) mod params;

pub use conv::{conv2d, conv_transpose2d, grad_enabled, no_grad};
pub use critic::{build_critic, Critic, CriticSpec};
pub use generator::{build_generator, Generator, GeneratorSpec};
pub use init::{glorot_limit, glorot_uniform_init, glorot_uniform_with};
pub use layers::{
    instance_norm, leaky_relu, reflect_pad, resize_conv_block, upsample_nearest2x, Conv2d,
    ConvTranspose2d, Norm, Padding, ResidualBlock, Upsample, UpsampleMode,
};
pub use params::{InitRecord, ParameterSet};

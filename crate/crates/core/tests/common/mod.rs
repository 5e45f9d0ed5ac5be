//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use qpgan::data::Style;
use qpgan::models::{CriticSpec, GeneratorSpec};
use qpgan::trainer::TrainConfig;
use rand::Rng;

/// Smooth colour ramps standing in for photos.
pub fn photo(i: u32, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            ((x * 3 + i * 20) % 256) as u8,
            ((y * 3) % 256) as u8,
            (((x + y) * 2 + i * 7) % 256) as u8,
        ])
    })
}

/// Flat two-tone blocks standing in for paintings.
pub fn painting(i: u32, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let b = ((x / 8 + y / 8 + i) % 2) as u8;
        Rgb([200 * b + 30, 120, 60 + 100 * (1 - b)])
    })
}

/// Writes `<root>/<style>/trainA` and `trainB` with the given image counts.
pub fn write_dataset(root: &Path, style: Style, n_photos: u32, n_paintings: u32, w: u32, h: u32) -> PathBuf {
    let base = root.join(style.dir_name());
    let a = base.join("trainA");
    let b = base.join("trainB");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    for i in 0..n_photos {
        photo(i, w, h).save(a.join(format!("{i:03}.png"))).unwrap();
    }
    for i in 0..n_paintings {
        painting(i, w, h).save(b.join(format!("{i:03}.png"))).unwrap();
    }
    base
}

/// The smallest networks that still have every layer kind; 16x16 crops.
pub fn tiny_config(root: &Path, out_dir: &Path, iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_style(Style::Vangogh);
    cfg.data_root = root.to_path_buf();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.crop_size = 16;
    cfg.batch_size = 2;
    cfg.total_iterations = iterations;
    cfg.checkpoint_every = 1000;
    cfg.generator = GeneratorSpec {
        base_width: 4,
        n_residual_blocks: 1,
        ..GeneratorSpec::default()
    };
    cfg.critic = CriticSpec {
        base_width: 4,
        n_layers: 2,
        ..CriticSpec::default()
    };
    cfg
}

/// Scaled-down training run: 64x64 crops, batch 4.
pub fn micro_config(root: &Path, out_dir: &Path, iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_style(Style::Vangogh);
    cfg.data_root = root.to_path_buf();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.crop_size = 64;
    cfg.batch_size = 4;
    cfg.total_iterations = iterations;
    cfg.checkpoint_every = 1000;
    cfg.generator = GeneratorSpec {
        base_width: 16,
        n_residual_blocks: 3,
        ..GeneratorSpec::default()
    };
    cfg.critic = CriticSpec {
        base_width: 16,
        n_layers: 3,
        ..CriticSpec::default()
    };
    cfg
}

/// Uniform values in `[-1, 1)`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    values(t)[0]
}

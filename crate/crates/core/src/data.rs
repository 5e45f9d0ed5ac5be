//! Unpaired image folders, preprocessing and random batch sampling.
//!
//! Pixels in `[0, 1]` are mapped to `[-1, 1]` with mean and std 0.5 per
//! channel. Training images are randomly flipped horizontally, then
//! center-cropped.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_image_batch, CHANNELS};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Consecutive unreadable draws tolerated before sampling gives up.
const MAX_REDRAWS: usize = 64;

/// Per-channel affine map between `[0, 1]` pixels and network values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCodec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PixelCodec {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.5 }
    }
}

impl PixelCodec {
    pub fn encode(&self, p: f64) -> f64 {
        (p - self.mean) / self.std
    }

    pub fn decode(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }

    pub fn encode_u8(&self, v: u8) -> f32 {
        self.encode(f64::from(v) / 255.0) as f32
    }

    /// Clamps to `[0, 1]` and rounds half up to an 8-bit count.
    pub fn decode_u8(&self, x: f64) -> u8 {
        let p = self.decode(x).clamp(0.0, 1.0);
        (p * 255.0 + 0.5).floor() as u8
    }
}

/// The four painting collections the directory layout knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Cezanne,
    Monet,
    Ukiyoe,
    Vangogh,
}

impl Style {
    pub fn dir_name(self) -> &'static str {
        match self {
            Style::Cezanne => "cezanne",
            Style::Monet => "monet",
            Style::Ukiyoe => "ukiyoe",
            Style::Vangogh => "vangogh",
        }
    }
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Two independent image collections: photos (`r`) and paintings (`s`).
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    pub domain_r_paths: Vec<PathBuf>,
    pub domain_s_paths: Vec<PathBuf>,
    pub crop_size: usize,
    pub flip_probability: f64,
}

impl UnpairedDataset {
    pub fn new(
        domain_r_paths: Vec<PathBuf>,
        domain_s_paths: Vec<PathBuf>,
        crop_size: usize,
        flip_probability: f64,
    ) -> Result<Self> {
        if domain_r_paths.is_empty() || domain_s_paths.is_empty() {
            return Err(Error::invalid(format!(
                "both domains need at least one image (photos: {}, paintings: {})",
                domain_r_paths.len(),
                domain_s_paths.len()
            )));
        }
        if crop_size == 0 {
            return Err(Error::invalid("crop size must be positive"));
        }
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(Error::invalid(format!(
                "flip probability must lie in [0, 1], got {flip_probability}"
            )));
        }
        Ok(Self {
            domain_r_paths,
            domain_s_paths,
            crop_size,
            flip_probability,
        })
    }

    /// Lists the images of two directories.
    pub fn from_dirs(dir_r: &Path, dir_s: &Path, crop_size: usize, flip_probability: f64) -> Result<Self> {
        Self::new(list_images(dir_r)?, list_images(dir_s)?, crop_size, flip_probability)
    }

    /// `<root>/<style>/trainA` (photos) and `<root>/<style>/trainB` (paintings).
    pub fn from_style_root(root: &Path, style: Style, crop_size: usize, flip_probability: f64) -> Result<Self> {
        let base = root.join(style.dir_name());
        Self::from_dirs(&base.join("trainA"), &base.join("trainB"), crop_size, flip_probability)
    }
}

/// Sorted image files (png / jpeg by extension) directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Decodes an image file to 8-bit RGB, dropping any alpha channel.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Offsets `(x, y)` of a centered `size x size` window.
pub fn center_crop_offsets(width: u32, height: u32, size: u32) -> (u32, u32) {
    ((width - size) / 2, (height - size) / 2)
}

/// Scales the image so its short side equals `size`, if either side is shorter.
pub fn resize_to_fit(image: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    if w >= size && h >= size {
        return image.clone();
    }
    resize_short_side(image, size)
}

/// Scales the image so its short side equals exactly `size`.
pub fn resize_short_side(image: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    if w.min(h) == size {
        return image.clone();
    }
    let scale = f64::from(size) / f64::from(w.min(h));
    let nw = ((f64::from(w) * scale).round() as u32).max(size);
    let nh = ((f64::from(h) * scale).round() as u32).max(size);
    imageops::resize(image, nw, nh, FilterType::Triangle)
}

/// Center crop of `size x size` (the image must be at least that large).
pub fn center_crop(image: &RgbImage, size: u32) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if w < size || h < size {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than the {size}x{size} crop"
        )));
    }
    let (x, y) = center_crop_offsets(w, h, size);
    Ok(imageops::crop_imm(image, x, y, size, size).to_image())
}

/// Planar `(3, h, w)` normalized values of an RGB image.
pub fn normalize(image: &RgbImage) -> Vec<f32> {
    let codec = PixelCodec::default();
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; CHANNELS * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..CHANNELS {
            out[c * plane + i] = codec.encode_u8(px[c]);
        }
    }
    out
}

/// Random horizontal flip, center crop and normalization of one training image.
///
/// Returns `(3, crop_size, crop_size)` values in `[-1, 1]`. Images with a side
/// shorter than `crop_size` are first scaled so the short side fits.
pub fn preprocess<R: Rng + ?Sized>(
    image: &RgbImage,
    crop_size: usize,
    flip_probability: f64,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let size = u32::try_from(crop_size).map_err(|_| Error::invalid("crop size too large"))?;
    let mut img = resize_to_fit(image, size);
    if rng.random_bool(flip_probability) {
        imageops::flip_horizontal_in_place(&mut img);
    }
    Ok(normalize(&center_crop(&img, size)?))
}

/// Inference-time preparation: scale the short side to `size`, center crop,
/// normalize. Returns a `(1, 3, size, size)` batch.
pub fn prepare_inference_image(image: &RgbImage, size: usize, device: &Device) -> Result<Tensor> {
    let s = u32::try_from(size).map_err(|_| Error::invalid("size too large"))?;
    let img = center_crop(&resize_short_side(image, s), s)?;
    Ok(Tensor::from_vec(normalize(&img), (1, CHANNELS, size, size), device)?)
}

/// `count` uniform draws with replacement from `0..n`.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

fn sample_domain<R: Rng + ?Sized>(
    paths: &[PathBuf],
    ds: &UnpairedDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(batch_size * CHANNELS * ds.crop_size * ds.crop_size);
    let mut drawn = 0;
    let mut failures = 0;
    while drawn < batch_size {
        let path = &paths[rng.random_range(0..paths.len())];
        match load_rgb(path).and_then(|img| preprocess(&img, ds.crop_size, ds.flip_probability, rng)) {
            Ok(values) => {
                out.extend(values);
                drawn += 1;
                failures = 0;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures += 1;
                if failures >= MAX_REDRAWS {
                    return Err(Error::invalid(format!(
                        "{MAX_REDRAWS} consecutive unreadable images, last: {}",
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// A sampled pair of batches in host memory, planar `(batch, 3, size, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HostBatch {
    pub batch_size: usize,
    pub crop_size: usize,
    pub photos: Vec<f32>,
    pub paintings: Vec<f32>,
}

impl HostBatch {
    pub fn to_tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        let shape = (self.batch_size, CHANNELS, self.crop_size, self.crop_size);
        Ok((
            Tensor::from_slice(&self.photos, shape, device)?,
            Tensor::from_slice(&self.paintings, shape, device)?,
        ))
    }
}

pub fn sample_host_batch<R: Rng + ?Sized>(ds: &UnpairedDataset, batch_size: usize, rng: &mut R) -> Result<HostBatch> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let photos = sample_domain(&ds.domain_r_paths, ds, batch_size, rng)?;
    let paintings = sample_domain(&ds.domain_s_paths, ds, batch_size, rng)?;
    Ok(HostBatch {
        batch_size,
        crop_size: ds.crop_size,
        photos,
        paintings,
    })
}

/// Independent with-replacement draws from each domain, paired by position.
pub fn sample_batch<R: Rng + ?Sized>(ds: &UnpairedDataset, batch_size: usize, rng: &mut R) -> Result<(Tensor, Tensor)> {
    sample_host_batch(ds, batch_size, rng)?.to_tensors(&Device::Cpu)
}

/// Random stream dedicated to one training iteration.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Background producer of per-iteration batches over a bounded queue.
///
/// Batch `k` depends only on `(seed, k)`, so a resumed run sees the same data
/// as an uninterrupted one.
pub struct BatchLoader {
    rx: Receiver<(u64, Result<HostBatch>)>,
    handle: Option<JoinHandle<()>>,
}

impl BatchLoader {
    pub fn spawn(
        ds: UnpairedDataset,
        batch_size: usize,
        seed: u64,
        iterations: std::ops::Range<u64>,
        capacity: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for k in iterations {
                let batch = sample_host_batch(&ds, batch_size, &mut iteration_rng(seed, k));
                if tx.send((k, batch)).is_err() {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    /// Next `(iteration, batch)`, or `None` once the range is exhausted.
    pub fn next_batch(&mut self) -> Option<(u64, Result<HostBatch>)> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Converts a batch in `[-1, 1]` back to 8-bit RGB images, clamping outliers.
pub fn denormalize(x: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = ensure_image_batch(x, "denormalize")?;
    if c != CHANNELS {
        return Err(Error::invalid(format!("expected {CHANNELS} channels, got {c}")));
    }
    let codec = PixelCodec::default();
    let values = x.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let plane = h * w;
    let mut images = Vec::with_capacity(n);
    for b in 0..n {
        let base = b * c * plane;
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([0, 1, 2].map(|ch| codec.decode_u8(values[base + ch * plane + i])))
        });
        images.push(img);
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn codec_endpoints() {
        let codec = PixelCodec::default();
        assert_eq!(codec.encode(1.0), 1.0);
        assert_eq!(codec.encode(0.0), -1.0);
        assert_eq!(codec.encode(0.5), 0.0);
        assert_eq!(codec.decode_u8(-1.0), 0);
        assert_eq!(codec.decode_u8(1.0), 255);
        assert_eq!(codec.decode_u8(0.0), 128);
        assert_eq!(codec.decode_u8(1.7), 255);
        assert_eq!(codec.decode_u8(-3.0), 0);
    }

    #[test]
    fn round_trip_every_count() {
        let codec = PixelCodec::default();
        for v in 0..=255u8 {
            let back = codec.decode_u8(f64::from(codec.encode_u8(v)));
            assert!((i16::from(back) - i16::from(v)).abs() <= 1, "{v} -> {back}");
        }
    }

    #[test]
    fn crop_offsets() {
        assert_eq!(center_crop_offsets(400, 300, 256), (72, 22));
        assert_eq!(center_crop_offsets(257, 259, 256), (0, 1));
        assert_eq!(center_crop_offsets(512, 512, 256), (128, 128));
    }

    #[test]
    fn preprocess_crops_centered_window() {
        // value at (x, y) encodes its coordinates
        let img = RgbImage::from_fn(400, 300, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = preprocess(&img, 256, 0.0, &mut rng).unwrap();
        assert_eq!(v.len(), 3 * 256 * 256);
        let codec = PixelCodec::default();
        assert_eq!(v[0], codec.encode_u8(72));
        assert_eq!(v[256 * 256], codec.encode_u8(22));
    }

    #[test]
    fn preprocess_upscales_small_images() {
        let img = RgbImage::from_pixel(40, 20, Rgb([255, 0, 128]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = preprocess(&img, 32, 0.5, &mut rng).unwrap();
        assert_eq!(v.len(), 3 * 32 * 32);
        assert!(v[..32 * 32].iter().all(|&p| p == 1.0));
        assert!(v[32 * 32..2 * 32 * 32].iter().all(|&p| p == -1.0));
    }

    #[test]
    fn flip_probability_one_mirrors() {
        let img = RgbImage::from_fn(8, 8, |x, _| Rgb([x as u8 * 10, 0, 0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flipped = preprocess(&img, 8, 1.0, &mut rng).unwrap();
        let plain = preprocess(&img, 8, 0.0, &mut rng).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(flipped[y * 8 + x], plain[y * 8 + 7 - x]);
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = RgbImage::from_fn(9, 5, |x, y| Rgb([x as u8, y as u8, (x * y) as u8]));
        let mut twice = img.clone();
        imageops::flip_horizontal_in_place(&mut twice);
        imageops::flip_horizontal_in_place(&mut twice);
        assert_eq!(img, twice);
    }

    #[test]
    fn denormalize_examples() {
        let x = Tensor::from_slice(&[-1.0f32, 0.0, 1.0], (1, 3, 1, 1), &Device::Cpu).unwrap();
        let imgs = denormalize(&x).unwrap();
        assert_eq!(imgs[0].get_pixel(0, 0), &Rgb([0, 128, 255]));
    }

    #[test]
    fn dataset_validation() {
        assert!(UnpairedDataset::new(vec![], vec!["a.png".into()], 256, 0.5).is_err());
        assert!(UnpairedDataset::new(vec!["a.png".into()], vec!["b.png".into()], 256, 1.5).is_err());
        assert!(UnpairedDataset::new(vec!["a.png".into()], vec!["b.png".into()], 0, 0.5).is_err());
    }

    #[test]
    fn iteration_streams_differ() {
        let a: u64 = iteration_rng(3, 0).random();
        let b: u64 = iteration_rng(3, 1).random();
        let a2: u64 = iteration_rng(3, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}

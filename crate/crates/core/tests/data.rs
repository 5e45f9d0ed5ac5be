mod common;

use std::path::PathBuf;

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use qpgan::data::{
    center_crop, center_crop_offsets, denormalize, iteration_rng, normalize, preprocess,
    prepare_inference_image, resize_to_fit, sample_batch, sample_host_batch, sample_indices,
    PixelCodec, Style, UnpairedDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn solid(v: u8, w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb([v, v, v]))
}

/// One solid image per value, written as PNG.
fn solid_files(dir: &std::path::Path, vals: &[u8], size: u32) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    vals.iter()
        .map(|&v| {
            let p = dir.join(format!("{v:03}.png"));
            solid(v, size, size).save(&p).unwrap();
            p
        })
        .collect()
}

#[test]
fn codec_examples() {
    let c = PixelCodec::default();
    assert_eq!(c.encode(1.0), 1.0);
    assert_eq!(c.encode(0.0), -1.0);
    assert_eq!(c.encode(0.5), 0.0);
    assert_eq!(c.decode_u8(-1.0), 0);
    assert_eq!(c.decode_u8(1.0), 255);
    assert_eq!(c.decode_u8(0.0), 128);
    assert_eq!(c.decode_u8(1.7), 255);
    assert_eq!(c.decode_u8(-3.0), 0);
}

#[test]
fn every_pixel_count_round_trips() {
    let img = RgbImage::from_fn(256, 1, |x, _| Rgb([x as u8, 255 - x as u8, (x as u8).wrapping_mul(7)]));
    let x = Tensor::from_vec(normalize(&img), (1, 3, 1, 256), &Device::Cpu).unwrap();
    let back = &denormalize(&x).unwrap()[0];
    for (a, b) in img.pixels().zip(back.pixels()) {
        for c in 0..3 {
            assert!((i32::from(a[c]) - i32::from(b[c])).abs() <= 1, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn denormalize_clamps() {
    let x = Tensor::from_vec(vec![1.7f32, -2.0, 0.0], (1, 3, 1, 1), &Device::Cpu).unwrap();
    assert_eq!(denormalize(&x).unwrap()[0].get_pixel(0, 0), &Rgb([255, 0, 128]));
}

#[test]
fn crop_offsets_for_a_landscape_image() {
    assert_eq!(center_crop_offsets(400, 300, 256), (72, 22));
    assert_eq!(center_crop_offsets(257, 256, 256), (0, 0));
    let img = RgbImage::from_fn(400, 300, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 0]));
    let crop = center_crop(&img, 256).unwrap();
    assert_eq!(crop.dimensions(), (256, 256));
    assert_eq!(crop.get_pixel(0, 0), img.get_pixel(72, 22));
    assert_eq!(crop.get_pixel(255, 255), img.get_pixel(72 + 255, 22 + 255));
}

#[test]
fn preprocess_shape_and_range() {
    let img = common::photo(1, 400, 300);
    let v = preprocess(&img, 256, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(v.len(), 3 * 256 * 256);
    assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));
}

#[test]
fn small_images_are_resized_before_cropping() {
    let img = common::photo(0, 100, 60);
    let fitted = resize_to_fit(&img, 64);
    assert_eq!(fitted.dimensions().1, 64);
    assert!(fitted.dimensions().0 >= 64);
    // large enough images are left alone
    assert_eq!(resize_to_fit(&img, 32).dimensions(), (100, 60));
    let v = preprocess(&img, 64, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(v.len(), 3 * 64 * 64);
}

#[test]
fn flips_follow_the_probability() {
    let img = RgbImage::from_fn(8, 8, |x, _| Rgb([x as u8 * 30, 0, 0]));
    let plain = normalize(&img);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        assert_eq!(preprocess(&img, 8, 0.0, &mut rng).unwrap(), plain);
    }
    let flipped = preprocess(&img, 8, 1.0, &mut rng).unwrap();
    assert_ne!(flipped, plain);
    let mut twice = image::imageops::flip_horizontal(&img);
    image::imageops::flip_horizontal_in_place(&mut twice);
    assert_eq!(twice, img);
    let as_image = RgbImage::from_fn(8, 8, |x, _| Rgb([(7 - x) as u8 * 30, 0, 0]));
    assert_eq!(flipped, normalize(&as_image));
}

#[test]
fn index_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = sample_indices(10, 10_000, &mut rng);
    let mut counts = [0usize; 10];
    for i in draws {
        counts[i] += 1;
    }
    let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() <= 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn batches_draw_images_uniformly() {
    let dir = tempfile::tempdir().unwrap();
    let vals: Vec<u8> = (0..10).map(|i| i * 25).collect();
    let photos = solid_files(&dir.path().join("a"), &vals, 8);
    let paintings = solid_files(&dir.path().join("b"), &[7], 8);
    let ds = UnpairedDataset::new(photos, paintings, 8, 0.5).unwrap();
    let codec = PixelCodec::default();
    let mut counts = [0usize; 10];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let b = sample_host_batch(&ds, 10, &mut rng).unwrap();
        for k in 0..10 {
            let v = codec.decode_u8(f64::from(b.photos[k * 3 * 64]));
            counts[vals.iter().position(|&x| x == v).unwrap()] += 1;
        }
    }
    let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() <= 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn batches_have_training_shape_and_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    common::write_dataset(dir.path(), Style::Monet, 3, 5, 300, 280);
    let ds = UnpairedDataset::from_style_root(dir.path(), Style::Monet, 256, 0.5).unwrap();
    let (r, s) = sample_batch(&ds, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(r.dims(), &[4, 3, 256, 256]);
    assert_eq!(s.dims(), &[4, 3, 256, 256]);
    let a = sample_host_batch(&ds, 4, &mut iteration_rng(3, 17)).unwrap();
    let b = sample_host_batch(&ds, 4, &mut iteration_rng(3, 17)).unwrap();
    let c = sample_host_batch(&ds, 4, &mut iteration_rng(3, 18)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let i1 = sample_indices(7, 50, &mut ChaCha8Rng::seed_from_u64(5));
    let i2 = sample_indices(7, 50, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(i1, i2);
}

#[test]
fn single_image_domains_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let photos = solid_files(&dir.path().join("a"), &[40], 16);
    let paintings = solid_files(&dir.path().join("b"), &[200], 16);
    let ds = UnpairedDataset::new(photos, paintings, 16, 0.5).unwrap();
    let b = sample_host_batch(&ds, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let per = 3 * 16 * 16;
    for k in 1..4 {
        assert_eq!(b.photos[k * per..(k + 1) * per], b.photos[..per]);
        assert_eq!(b.paintings[k * per..(k + 1) * per], b.paintings[..per]);
    }
}

#[test]
fn unreadable_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut photos = solid_files(&dir.path().join("a"), &[40], 16);
    let broken = dir.path().join("a").join("broken.png");
    std::fs::write(&broken, b"not an image").unwrap();
    photos.push(broken);
    let paintings = solid_files(&dir.path().join("b"), &[200], 16);
    let ds = UnpairedDataset::new(photos, paintings, 16, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let b = sample_host_batch(&ds, 4, &mut rng).unwrap();
        assert_eq!(b.photos.len(), 4 * 3 * 16 * 16);
    }
}

#[test]
fn dataset_requires_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let photos = solid_files(&dir.path().join("a"), &[40], 16);
    assert!(UnpairedDataset::new(photos, vec![], 16, 0.5).is_err());
    assert!(UnpairedDataset::from_style_root(dir.path(), Style::Cezanne, 16, 0.5).is_err());
}

#[test]
fn inference_images_are_resized_then_cropped() {
    let img = common::photo(2, 300, 200);
    for size in [64usize, 256, 512] {
        let x = prepare_inference_image(&img, size, &Device::Cpu).unwrap();
        assert_eq!(x.dims(), &[1, 3, size, size]);
    }
}

proptest! {
    #[test]
    fn codec_inverts_on_the_unit_interval(p in 0.0f64..=1.0) {
        let c = PixelCodec::default();
        prop_assert!((c.decode(c.encode(p)) - p).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn crop_offsets_are_floored_halves(w in 256u32..600, h in 256u32..600) {
        let (x, y) = center_crop_offsets(w, h, 256);
        prop_assert_eq!((x, y), ((w - 256) / 2, (h - 256) / 2));
        if (w - 256) % 2 == 0 {
            prop_assert_eq!(x, w - 256 - x);
        }
    }
}

//! A procedurally generated stand-in for CIFAR-10 written in the same binary
//! layout, for machines without the real archive.
//!
//! Each of the ten classes pairs a hue band with one of five foreground
//! shapes. Hue bands of neighbouring classes overlap and shapes repeat every
//! five classes, so neither cue alone identifies the class.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::ImageDims;
use crate::data::{encode_records, ImageBatch, CIFAR10_CLASSES, RECORDS_PER_FILE, TEST_FILES, TRAIN_FILES};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn in_shape(kind: usize, x: f32, y: f32, cx: f32, cy: f32, r: f32, phase: f32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => dx.abs() <= r && dy.abs() <= r && ((y + phase) / 3.0).floor() as i32 % 2 == 0,
        3 => dx.abs() <= r && dy.abs() <= r && ((x + phase) / 3.0).floor() as i32 % 2 == 0,
        _ => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
    }
}

/// One 32x32x3 image of class `label`, `(h, w, c)` order.
pub fn render(label: usize, rng: &mut Rng) -> Vec<f32> {
    let size = 32usize;
    let noise = Normal::new(0.0f32, 0.04).expect("valid std");
    let hue = label as f32 / CIFAR10_CLASSES as f32 + rng.random_range(-0.09f32..0.09);
    let sat = rng.random_range(0.35f32..0.85);
    let top = hsv_to_rgb(hue, sat, rng.random_range(0.45f32..0.95));
    let bottom = hsv_to_rgb(hue + rng.random_range(-0.05f32..0.05), sat, rng.random_range(0.2f32..0.7));
    let fg = hsv_to_rgb(
        hue + 0.5 + rng.random_range(-0.15f32..0.15),
        rng.random_range(0.3f32..1.0),
        rng.random_range(0.4f32..1.0),
    );
    let kind = label % 5;
    let r = rng.random_range(5.0f32..11.0);
    let cx = rng.random_range(r..size as f32 - r);
    let cy = rng.random_range(r..size as f32 - r);
    let phase = rng.random_range(0.0f32..6.0);

    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let t = y as f32 / (size - 1) as f32;
        for x in 0..size {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = in_shape(kind, xf, yf, cx, cy, r, phase);
            for c in 0..3 {
                let base = if inside { fg[c] } else { top[c] * (1.0 - t) + bottom[c] * t };
                out.push((base + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// `count` images with uniformly drawn labels.
pub fn generate(count: usize, rng: &mut Rng) -> Result<ImageBatch> {
    let mut pixels = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..CIFAR10_CLASSES);
        pixels.extend(render(label, rng));
        labels.push(label);
    }
    ImageBatch::new(pixels, labels, ImageDims::CIFAR10, CIFAR10_CLASSES)
}

/// Writes a full train/test split (six files of 10000 records) to `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, name) in TRAIN_FILES.iter().chain(TEST_FILES.iter()).enumerate() {
        let mut rng = rng::stream(seed, Stream::Synthetic, i as u64);
        let batch = generate(RECORDS_PER_FILE, &mut rng)?;
        let path = dir.join(name);
        std::fs::write(&path, encode_records(&batch)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

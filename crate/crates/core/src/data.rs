//! Procedural grayscale images with flat and detailed regions.
//!
//! Each toy image is a smooth shaded background with one rectangular patch
//! of fine, unpredictable texture. A light pixel noise keeps the density
//! well conditioned. The bundled 20-image set under `assets/toy` was
//! rendered by [`toy_corpus`] with [`BUNDLED_SEED`] and quantized to 8 bits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{train_mle, FlowConfig, FlowModel, PriorTrainConfig, TrainReport};
use crate::io::image::decode_png;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

pub const TOY_SIDE: usize = 32;
pub const BUNDLED_SEED: u64 = 2024;
/// Seed of the prior-training stream; disjoint from the bundled images.
pub const TRAINING_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyStyle {
    pub side: usize,
    /// Range of the patch side as a fraction of the image side.
    pub patch: (f64, f64),
    /// Peak deviation of the texture from the background.
    pub texture_amplitude: f64,
    pub noise_std: f64,
}

impl Default for ToyStyle {
    fn default() -> Self {
        Self {
            side: TOY_SIDE,
            patch: (0.35, 0.5),
            texture_amplitude: 0.3,
            noise_std: 0.05,
        }
    }
}

fn background(style: &ToyStyle, rng: &mut SeededRng) -> Vec<f64> {
    let n = style.side;
    let base = rng.uniform_range(0.4, 0.6);
    let (gx, gy) = (rng.uniform_range(-0.15, 0.15), rng.uniform_range(-0.15, 0.15));
    let (freq, phase, amp) = (
        rng.uniform_range(0.5, 1.5),
        rng.uniform_range(0.0, std::f64::consts::TAU),
        rng.uniform_range(0.0, 0.08),
    );
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (u, v) = (j as f64 / (n - 1) as f64 - 0.5, i as f64 / (n - 1) as f64 - 0.5);
            let wave = amp * (std::f64::consts::TAU * freq * (u + v) + phase).sin();
            out.push(base + gx * u + gy * v + wave);
        }
    }
    out
}

fn finish<S: Real>(side: usize, mut pixels: Vec<f64>, noise_std: f64, rng: &mut SeededRng) -> Result<Tensor<S>> {
    for p in &mut pixels {
        *p = (*p + noise_std * rng.normal()).clamp(0.0, 1.0);
    }
    Tensor::from_f64([side, side], &pixels)
}

/// One `[side, side]` toy image.
pub fn toy_image<S: Real>(style: &ToyStyle, rng: &mut SeededRng) -> Result<Tensor<S>> {
    let n = style.side;
    let mut px = background(style, rng);
    let frac = rng.uniform_range(style.patch.0, style.patch.1);
    let (h, w) = (
        ((frac * n as f64).round() as usize).clamp(1, n),
        ((rng.uniform_range(style.patch.0, style.patch.1) * n as f64).round() as usize).clamp(1, n),
    );
    let (top, left) = (rng.below(n - h + 1), rng.below(n - w + 1));
    for i in top..top + h {
        for j in left..left + w {
            px[i * n + j] += style.texture_amplitude * rng.uniform_range(-1.0, 1.0);
        }
    }
    finish(n, px, style.noise_std, rng)
}

/// `count` toy images, image `i` drawn from stream `i` of `seed`.
pub fn toy_corpus<S: Real>(style: &ToyStyle, count: usize, seed: u64) -> Result<Vec<Tensor<S>>> {
    let root = SeededRng::new(seed);
    (0..count)
        .map(|i| toy_image(style, &mut root.derive(i as u64)))
        .collect()
}

/// Textured on the left half and flat on the right, or mirrored.
pub fn half_textured<S: Real>(style: &ToyStyle, texture_left: bool, rng: &mut SeededRng) -> Result<Tensor<S>> {
    let n = style.side;
    let base = rng.uniform_range(0.4, 0.6);
    let mut px = vec![base; n * n];
    for i in 0..n {
        for j in 0..n {
            if (j < n / 2) == texture_left {
                px[i * n + j] += style.texture_amplitude * rng.uniform_range(-1.0, 1.0);
            }
        }
    }
    finish(n, px, style.noise_std, rng)
}

/// Training settings for the toy prior. Longer schedules keep lowering the
/// training loss but sharpen the density until the inner ascent steps
/// become unstable.
pub fn toy_prior_config() -> PriorTrainConfig {
    PriorTrainConfig {
        epochs: 5,
        ..PriorTrainConfig::default()
    }
}

/// The six-coupling 32×32 prior trained on `count` fresh toy images.
pub fn train_toy_prior(config: &PriorTrainConfig, count: usize, seed: u64) -> Result<(FlowModel<f32>, TrainReport)> {
    let corpus: Vec<Tensor<f32>> = toy_corpus(&ToyStyle::default(), count, TRAINING_SEED.wrapping_add(seed))?
        .into_iter()
        .map(|t| t.reshape([TOY_SIDE * TOY_SIDE]))
        .collect::<Result<_>>()?;
    train_prior(&corpus, TOY_SIDE, config, seed)
}

/// Trains a fresh six-coupling prior on flattened `side × side` images.
pub fn train_prior(
    corpus: &[Tensor<f32>],
    side: usize,
    config: &PriorTrainConfig,
    seed: u64,
) -> Result<(FlowModel<f32>, TrainReport)> {
    let mut rng = SeededRng::new(seed);
    let mut model = FlowModel::new(&FlowConfig::for_image(side), &mut rng)?;
    let report = train_mle(&mut model, corpus, config, &mut rng)?;
    Ok((model, report))
}

macro_rules! bundled {
    ($($i:literal),*) => {
        [$((concat!("toy", $i), include_bytes!(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy/toy", $i, ".png")).as_slice())),*]
    };
}

static BUNDLED: [(&str, &[u8]); 20] = bundled!(
    "00", "01", "02", "03", "04", "05", "06", "07", "08", "09", "10", "11", "12", "13", "14", "15", "16", "17",
    "18", "19"
);

/// The shipped 20-image corpus as `(id, [32, 32] image)` pairs.
pub fn bundled_toy_corpus<S: Real>() -> Result<Vec<(String, Tensor<S>)>> {
    BUNDLED
        .iter()
        .map(|(id, bytes)| {
            let img = decode_png(bytes, Path::new(id))?;
            if img.shape() != [TOY_SIDE, TOY_SIDE] {
                return Err(Error::invalid(format!("bundled image {id} has shape {:?}", img.shape())));
            }
            Ok((id.to_string(), img.cast()))
        })
        .collect()
}

//! A small fully-connected glyph decoder: `(z, p_left, p_bottom) → g×g` bitmap.
//!
//! Each atlas glyph owns a learned code; the padding ratios nudge the glyph
//! inside its frame by up to `max_shift` pixels, mirroring the shifted
//! training targets.

use crate::autodiff::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamW, BoundParams, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

use super::GlyphAtlas;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub max_shift: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 64,
            max_shift: 1,
            steps: 1500,
            batch_size: 36,
            learning_rate: 3e-3,
        }
    }
}

const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGenerator<S: Real = f32> {
    params: ParamStore<S>,
    glyph_size: usize,
    max_shift: usize,
}

impl<S: Real> DecoderGenerator<S> {
    pub fn init(config: &DecoderConfig, atlas: &GlyphAtlas, rng: &mut SeededRng) -> Self {
        let (d, h, g) = (config.latent_dim, config.hidden, atlas.glyph_size());
        let mut params = ParamStore::new();
        params.insert("decoder.codes", rng.normal_tensor([atlas.len(), d], 1.0));
        let std_in = 1.0 / ((d + 2) as f64).sqrt();
        params.insert("decoder.wz", rng.normal_tensor([d, h], std_in));
        params.insert("decoder.wl", rng.normal_tensor([h], std_in));
        params.insert("decoder.wb", rng.normal_tensor([h], std_in));
        params.insert("decoder.b0", Tensor::zeros([h]));
        for i in 1..HIDDEN_LAYERS {
            params.insert(format!("decoder.w{i}"), rng.normal_tensor([h, h], 1.0 / (h as f64).sqrt()));
            params.insert(format!("decoder.b{i}"), Tensor::zeros([h]));
        }
        params.insert("decoder.out.w", rng.normal_tensor([h, g * g], 1.0 / (h as f64).sqrt()));
        params.insert("decoder.out.b", Tensor::zeros([g * g]));
        Self {
            params,
            glyph_size: g,
            max_shift: config.max_shift,
        }
    }

    /// Rebuilds a decoder from stored parameters (for example an `HVMF` file).
    pub fn from_params(params: ParamStore<S>, max_shift: usize) -> Result<Self> {
        let out = params.require("decoder.out.b")?;
        let g = (out.len() as f64).sqrt().round() as usize;
        if g * g != out.len() {
            return Err(Error::Checkpoint("decoder output is not a square glyph".into()));
        }
        for name in ["decoder.codes", "decoder.wz", "decoder.wl", "decoder.wb", "decoder.b0", "decoder.out.w"] {
            params.require(name)?;
        }
        Ok(Self {
            params,
            glyph_size: g,
            max_shift,
        })
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn glyph_size(&self) -> usize {
        self.glyph_size
    }

    pub fn max_shift(&self) -> usize {
        self.max_shift
    }

    pub fn latent_dim(&self) -> usize {
        self.params.get("decoder.wz").map_or(0, |w| w.shape()[0])
    }

    pub fn cast<T: Real>(&self) -> DecoderGenerator<T> {
        DecoderGenerator {
            params: self.params.cast(),
            glyph_size: self.glyph_size,
            max_shift: self.max_shift,
        }
    }

    /// The learned code of atlas glyph `index`.
    pub fn code(&self, index: usize) -> Result<Vec<f64>> {
        let codes = self.params.require("decoder.codes")?;
        if index >= codes.shape()[0] {
            return Err(Error::invalid(format!("no code for glyph {index}")));
        }
        Ok(codes.row(index)?.to_f64_vec())
    }

    /// `z: [B, d]`, `pl`, `pb`: `[B, 1]` (or rank-0 for a single glyph) to `[B, g²]`.
    fn forward(&self, bound: &BoundParams<S>, z: &Var<S>, pl: &Var<S>, pb: &Var<S>) -> Result<Var<S>> {
        let mut h = z
            .matmul(bound.var("decoder.wz")?)?
            .add(&pl.mul(bound.var("decoder.wl")?)?)?
            .add(&pb.mul(bound.var("decoder.wb")?)?)?
            .add(bound.var("decoder.b0")?)?
            .tanh()?;
        for i in 1..HIDDEN_LAYERS {
            h = h
                .matmul(bound.var(&format!("decoder.w{i}"))?)?
                .add(bound.var(&format!("decoder.b{i}"))?)?
                .tanh()?;
        }
        h.matmul(bound.var("decoder.out.w")?)?
            .add(bound.var("decoder.out.b")?)?
            .sigmoid()
    }

    /// One `g×g` glyph, differentiable in the code and both ratios.
    pub fn decode_var(&self, z: &Var<S>, p_left: &Var<S>, p_bottom: &Var<S>) -> Result<Var<S>> {
        let d = self.latent_dim();
        if z.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let g = self.glyph_size;
        self.forward(&self.params.bind(None), &z.reshape([1, d])?, p_left, p_bottom)?
            .reshape([g, g])
    }

    pub fn decode(&self, z: &[f64], p_left: f64, p_bottom: f64) -> Result<Tensor<S>> {
        let z = Var::constant(Tensor::from_f64([z.len()], z)?);
        let pl = Var::scalar(S::lit(p_left));
        let pb = Var::scalar(S::lit(p_bottom));
        Ok(self.decode_var(&z, &pl, &pb)?.into_value())
    }

    /// Pixel shift the decoder is trained to apply for a pair of ratios.
    pub fn shift_for(&self, p_left: f64, p_bottom: f64) -> (i64, i64) {
        let m = self.max_shift as f64;
        (
            ((p_left - 0.5) * 2.0 * m).round() as i64,
            ((p_bottom - 0.5) * 2.0 * m).round() as i64,
        )
    }
}

/// The glyph moved right by `dx` and up by `dy` pixels, zero-filled.
pub fn shifted_glyph(glyph: &Tensor<f32>, dx: i64, dy: i64) -> Tensor<f32> {
    let g = glyph.shape()[0] as i64;
    Tensor::from_fn([g as usize, g as usize], |k| {
        let (r, c) = (k as i64 / g, k as i64 % g);
        let (sr, sc) = (r + dy, c - dx);
        if (0..g).contains(&sr) && (0..g).contains(&sc) {
            glyph.data()[(sr * g + sc) as usize]
        } else {
            0.0
        }
    })
    .expect("shift preserves finiteness")
}

/// Fits codes and decoder weights to the atlas under random ratio conditions.
/// Returns the per-step mean squared error.
pub fn train_decoder(
    decoder: &mut DecoderGenerator<f32>,
    atlas: &GlyphAtlas,
    config: &DecoderConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("decoder batch size and learning rate must be positive".into()));
    }
    let k = atlas.len();
    let mut opt = AdamW::new(config.learning_rate).with_weight_decay(0.0);
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let b = config.batch_size;
        let (mut onehot, mut pl, mut pb, mut targets) = (vec![0.0f32; b * k], vec![], vec![], vec![]);
        for row in 0..b {
            let idx = rng.below(k);
            onehot[row * k + idx] = 1.0;
            let (l, bt) = (rng.uniform(), rng.uniform());
            pl.push(l as f32);
            pb.push(bt as f32);
            let (dx, dy) = decoder.shift_for(l, bt);
            targets.push(shifted_glyph(atlas.by_index(idx), dx, dy).reshape([decoder.glyph_size.pow(2)])?);
        }
        let tape = Tape::new();
        let bound = decoder.params.bind(Some(&tape));
        let z = Var::constant(Tensor::new([b, k], onehot)?).matmul(bound.var("decoder.codes")?)?;
        let out = decoder.forward(
            &bound,
            &z,
            &Var::constant(Tensor::new([b, 1], pl)?),
            &Var::constant(Tensor::new([b, 1], pb)?),
        )?;
        let loss = out
            .sub(&Var::constant(Tensor::stack_rows(&targets)?))?
            .square()?
            .mean()?;
        let grads = bound.gradients(&backward(&loss)?);
        opt.step(decoder.params.tensors_mut(), &grads)?;
        curve.push(loss.item()? as f64);
    }
    Ok(curve)
}

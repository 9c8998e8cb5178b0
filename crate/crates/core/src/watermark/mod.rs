//! Watermark images, their soft masks and the observations they induce.

mod atlas;
pub mod decoder;

use std::rc::Rc;

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

pub use atlas::GlyphAtlas;
pub use decoder::{DecoderConfig, DecoderGenerator};

/// Mask threshold and sharpness.
pub const ALPHA: f64 = 0.15;
pub const BETA: f64 = 0.01;

/// Rendered glyph footprint as a fraction of the image area.
pub const MIN_AREA_FRACTION: f64 = 0.04;
pub const MAX_AREA_FRACTION: f64 = 0.40;

/// Raw value used for a padding ratio of exactly 0 or 1.
pub const EDGE_RAW: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub enum GlyphSource {
    Atlas(char),
    Latent(Vec<f64>),
}

/// Learnable description of one watermark. The padding ratios are
/// `sigmoid(raw_left)` and `sigmoid(raw_bottom)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkParams {
    pub glyph: GlyphSource,
    pub raw_left: f64,
    pub raw_bottom: f64,
    pub log_scale: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of the ratio squashing, saturating at `±EDGE_RAW`.
pub fn ratio_to_raw(p: f64) -> f64 {
    if p <= 0.0 {
        -EDGE_RAW
    } else if p >= 1.0 {
        EDGE_RAW
    } else {
        (p / (1.0 - p)).ln().clamp(-EDGE_RAW, EDGE_RAW)
    }
}

impl WatermarkParams {
    pub fn new(glyph: GlyphSource, p_left: f64, p_bottom: f64, log_scale: f64) -> Self {
        Self {
            glyph,
            raw_left: ratio_to_raw(p_left),
            raw_bottom: ratio_to_raw(p_bottom),
            log_scale,
        }
    }

    pub fn p_left(&self) -> f64 {
        sigmoid(self.raw_left)
    }

    pub fn p_bottom(&self) -> f64 {
        sigmoid(self.raw_bottom)
    }

    pub fn latent(&self) -> Option<&[f64]> {
        match &self.glyph {
            GlyphSource::Latent(z) => Some(z),
            GlyphSource::Atlas(_) => None,
        }
    }
}

/// Tracked handles for the continuous parameters of a [`WatermarkParams`].
#[derive(Debug, Clone)]
pub struct ParamVars<S: Real> {
    pub raw_left: Var<S>,
    pub raw_bottom: Var<S>,
    pub log_scale: Var<S>,
    pub latent: Option<Var<S>>,
}

impl<S: Real> ParamVars<S> {
    /// Constants carrying the parameter values; nothing is tracked.
    pub fn constant(p: &WatermarkParams) -> Self {
        Self {
            raw_left: Var::scalar(S::lit(p.raw_left)),
            raw_bottom: Var::scalar(S::lit(p.raw_bottom)),
            log_scale: Var::scalar(S::lit(p.log_scale)),
            latent: p
                .latent()
                .map(|z| Var::constant(Tensor::from_f64([z.len()], z).expect("finite latent"))),
        }
    }

    /// Leaves on `tape`, ready for differentiation.
    pub fn leaves(p: &WatermarkParams, tape: &crate::Tape<S>) -> Self {
        Self {
            raw_left: tape.leaf(Tensor::scalar(S::lit(p.raw_left))),
            raw_bottom: tape.leaf(Tensor::scalar(S::lit(p.raw_bottom))),
            log_scale: tape.leaf(Tensor::scalar(S::lit(p.log_scale))),
            latent: p
                .latent()
                .map(|z| tape.leaf(Tensor::from_f64([z.len()], z).expect("finite latent"))),
        }
    }

    pub fn all(&self) -> Vec<&Var<S>> {
        let mut v = vec![&self.raw_left, &self.raw_bottom, &self.log_scale];
        v.extend(self.latent.as_ref());
        v
    }
}

/// `max(0, 1 - |d|)`, the bilinear interpolation kernel.
struct Tent;

impl<S: Real> CustomOp<S> for Tent {
    fn name(&self) -> &'static str {
        "tent"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let d = inputs[0].zip_with(grad, "tent backward", |d, g| {
            if d > S::zero() && d < S::one() {
                -g
            } else if d < S::zero() && d > -S::one() {
                g
            } else {
                S::zero()
            }
        })?;
        Ok(vec![Some(d)])
    }
}

fn tent<S: Real>(d: &Var<S>) -> Result<Var<S>> {
    let out = d.value().map("tent", |d| (S::one() - d.abs()).max(S::zero()))?;
    Var::custom(Rc::new(Tent), &[d], out)
}

struct Clamp {
    lo: f64,
    hi: f64,
}

impl<S: Real> CustomOp<S> for Clamp {
    fn name(&self) -> &'static str {
        "clamp"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let (lo, hi) = (S::lit(self.lo), S::lit(self.hi));
        let d = inputs[0].zip_with(grad, "clamp backward", |x, g| {
            if x > lo && x < hi {
                g
            } else {
                S::zero()
            }
        })?;
        Ok(vec![Some(d)])
    }
}

fn clamp<S: Real>(x: &Var<S>, lo: f64, hi: f64) -> Result<Var<S>> {
    let out = x.value().map("clamp", |v| v.max(S::lit(lo)).min(S::lit(hi)))?;
    Var::custom(Rc::new(Clamp { lo, hi }), &[x], out)
}

/// Places a `g×g` glyph into an `S×S` frame by a separable bilinear warp.
///
/// Output pixel `(i, j)` samples the glyph at `((i - top)/s, (j - left)/s)`
/// where `left = p_left·free`, `top = (1 - p_bottom)·free` and
/// `free = S - 1 - (g - 1)·s`, so ratio 0 touches the left (bottom) edge and
/// ratio 1 the right (top) edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Renderer {
    side: usize,
    glyph_size: usize,
    log_scale_min: f64,
    log_scale_max: f64,
}

impl Renderer {
    pub fn new(side: usize, glyph_size: usize) -> Result<Self> {
        if glyph_size < 2 {
            return Err(Error::invalid("glyph size must be at least 2"));
        }
        let span = (glyph_size - 1) as f64;
        let lo = (MIN_AREA_FRACTION.sqrt() * side as f64 - 1.0) / span;
        let hi = (MAX_AREA_FRACTION.sqrt() * side as f64 - 1.0) / span;
        if !(lo > 0.0) {
            return Err(Error::invalid(format!(
                "image side {side} is too small to hold a {glyph_size}px glyph"
            )));
        }
        Ok(Self {
            side,
            glyph_size,
            log_scale_min: lo.ln(),
            log_scale_max: hi.ln(),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn glyph_size(&self) -> usize {
        self.glyph_size
    }

    pub fn log_scale_bounds(&self) -> (f64, f64) {
        (self.log_scale_min, self.log_scale_max)
    }

    pub fn clamp_log_scale(&self, log_scale: f64) -> f64 {
        log_scale.clamp(self.log_scale_min, self.log_scale_max)
    }

    /// Footprint side length in pixels for a given log scale.
    pub fn footprint(&self, log_scale: f64) -> f64 {
        (self.glyph_size - 1) as f64 * self.clamp_log_scale(log_scale).exp() + 1.0
    }

    /// Distance from the nearest kink of any kernel weight, in units of the
    /// tent argument. Finite-difference checks need this to exceed the probe step.
    pub fn kink_margin(&self, params: &WatermarkParams) -> f64 {
        let g = self.glyph_size;
        let scale = self.clamp_log_scale(params.log_scale).exp();
        let free = (self.side - 1) as f64 - (g - 1) as f64 * scale;
        let offsets = [params.p_left() * free, (1.0 - params.p_bottom()) * free];
        let width = scale.max(1.0);
        // the kernel switches form at unit scale
        let mut margin = scale.ln().abs() * self.side as f64;
        for off in offsets {
            for j in 0..self.side {
                for b in 0..g {
                    let d = (j as f64 - off - scale * b as f64) / width;
                    for kink in [-1.0, 0.0, 1.0] {
                        margin = margin.min((d - kink).abs());
                    }
                }
            }
        }
        margin
    }

    /// `[side, g]` weights of glyph pixel `b` on image pixel `j`. Enlarging
    /// interpolates the glyph; shrinking splats each glyph pixel with a
    /// one-pixel tent scaled by `s`, which conserves ink at every offset.
    fn kernel<S: Real>(&self, offset: &Var<S>, scale: &Var<S>) -> Result<Var<S>> {
        let (n, g) = (self.side, self.glyph_size);
        let pos = Var::constant(Tensor::from_fn([n, 1], |i| S::lit(i as f64))?);
        let idx = Var::constant(Tensor::from_fn([1, g], |b| S::lit(b as f64))?);
        let d = pos.sub(offset)?.sub(&idx.mul(scale)?)?;
        if scale.value().data()[0] >= S::one() {
            tent(&d.div(scale)?)
        } else {
            tent(&d)?.mul(scale)
        }
    }

    /// Flattened `[S·S]` watermark image, differentiable in every input.
    pub fn render_var<S: Real>(&self, vars: &ParamVars<S>, glyph: &Var<S>) -> Result<Var<S>> {
        let g = self.glyph_size;
        if glyph.shape() != [g, g] {
            return Err(Error::ShapeMismatch {
                op: "render",
                lhs: glyph.shape().to_vec(),
                rhs: vec![g, g],
            });
        }
        let scale = clamp(&vars.log_scale, self.log_scale_min, self.log_scale_max)?.exp()?;
        let free = scale
            .mul_scalar(S::lit(-((g - 1) as f64)))?
            .add_scalar(S::lit((self.side - 1) as f64))?;
        let left = vars.raw_left.sigmoid()?.mul(&free)?;
        let top = vars.raw_bottom.neg()?.sigmoid()?.mul(&free)?;
        let kx = self.kernel(&left, &scale)?;
        let ky = self.kernel(&top, &scale)?;
        ky.matmul(glyph)?
            .matmul_t(&kx, false, true)?
            .reshape([self.pixels()])
    }
}

/// Atlas or decoder glyphs placed by a [`Renderer`].
#[derive(Debug, Clone)]
pub struct WatermarkGenerator<S: Real = f32> {
    renderer: Renderer,
    atlas: GlyphAtlas,
    decoder: Option<DecoderGenerator<S>>,
}

impl<S: Real> WatermarkGenerator<S> {
    /// Generator over the bundled atlas for `side×side` images.
    pub fn new(side: usize) -> Result<Self> {
        let atlas = GlyphAtlas::bundled().clone();
        Ok(Self {
            renderer: Renderer::new(side, atlas.glyph_size())?,
            atlas,
            decoder: None,
        })
    }

    /// Generator over a custom atlas.
    pub fn with_atlas(side: usize, atlas: GlyphAtlas) -> Result<Self> {
        Ok(Self {
            renderer: Renderer::new(side, atlas.glyph_size())?,
            atlas,
            decoder: None,
        })
    }

    pub fn with_decoder(mut self, decoder: DecoderGenerator<S>) -> Result<Self> {
        if decoder.glyph_size() != self.renderer.glyph_size() {
            return Err(Error::invalid("decoder glyph size differs from the atlas"));
        }
        self.decoder = Some(decoder);
        Ok(self)
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn atlas(&self) -> &GlyphAtlas {
        &self.atlas
    }

    pub fn decoder(&self) -> Option<&DecoderGenerator<S>> {
        self.decoder.as_ref()
    }

    pub fn cast<T: Real>(&self) -> WatermarkGenerator<T> {
        WatermarkGenerator {
            renderer: self.renderer,
            atlas: self.atlas.clone(),
            decoder: self.decoder.as_ref().map(DecoderGenerator::cast),
        }
    }

    pub fn glyph_var(&self, params: &WatermarkParams, vars: &ParamVars<S>) -> Result<Var<S>> {
        match (&params.glyph, &vars.latent) {
            (GlyphSource::Atlas(c), _) => Ok(Var::constant(self.atlas.get(*c)?.cast())),
            (GlyphSource::Latent(_), Some(z)) => {
                let dec = self
                    .decoder
                    .as_ref()
                    .ok_or_else(|| Error::invalid("latent watermark needs a decoder"))?;
                dec.decode_var(z, &vars.raw_left.sigmoid()?, &vars.raw_bottom.sigmoid()?)
            }
            (GlyphSource::Latent(_), None) => Err(Error::invalid("latent watermark without a latent var")),
        }
    }

    pub fn render_var(&self, params: &WatermarkParams, vars: &ParamVars<S>) -> Result<Var<S>> {
        let glyph = self.glyph_var(params, vars)?;
        self.renderer.render_var(vars, &glyph)
    }

    pub fn render(&self, params: &WatermarkParams) -> Result<Tensor<S>> {
        Ok(self.render_var(params, &ParamVars::constant(params))?.into_value())
    }
}

/// Coverage field `W = sigmoid((m - α)/β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<S: Real = f32> {
    pub coverage: Tensor<S>,
    pub alpha: f64,
    pub beta: f64,
}

impl<S: Real> SoftMask<S> {
    /// Per-pixel observation weight `1 - W`.
    pub fn observed(&self) -> Result<Tensor<S>> {
        self.coverage.map("observed", |w| S::one() - w)
    }

    /// The mask thresholded at 0.5, for ablations and classical removers.
    pub fn binarized(&self) -> Result<Tensor<S>> {
        self.coverage
            .map("binarize", |w| if w >= S::lit(0.5) { S::one() } else { S::zero() })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            op: "soft_mask",
            detail: format!("beta must be positive, got {beta}"),
        })
    }
}

pub fn soft_mask_var<S: Real>(m: &Var<S>, alpha: f64, beta: f64) -> Result<Var<S>> {
    check_beta(beta)?;
    m.add_scalar(S::lit(-alpha))?.mul_scalar(S::lit(1.0 / beta))?.sigmoid()
}

pub fn soft_mask<S: Real>(m: &Tensor<S>, alpha: f64, beta: f64) -> Result<SoftMask<S>> {
    Ok(SoftMask {
        coverage: soft_mask_var(&Var::constant(m.clone()), alpha, beta)?.into_value(),
        alpha,
        beta,
    })
}

/// `y = (1 - W) ⊙ x_T + e` with `e` supplied by the caller.
pub fn observe_var<S: Real>(x_t: &Tensor<S>, coverage: &Var<S>, noise: &Tensor<S>) -> Result<Var<S>> {
    coverage
        .neg()?
        .add_scalar(S::one())?
        .mul(&Var::constant(x_t.clone()))?
        .add(&Var::constant(noise.clone()))
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Draws `e ~ N(0, σ²)` of `x_t`'s shape from `rng`; the draw happens even at σ = 0.
pub fn draw_noise<S: Real>(shape: &[usize], sigma: f64, rng: &mut SeededRng) -> Result<Tensor<S>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise std must be non-negative, got {sigma}")));
    }
    Ok(rng.normal_tensor(shape.to_vec(), sigma))
}

pub fn compose_observation<S: Real>(
    x_t: &Tensor<S>,
    mask: &SoftMask<S>,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<Tensor<S>> {
    check_same("compose_observation", x_t.shape(), mask.coverage.shape())?;
    let noise = draw_noise(x_t.shape(), sigma, rng)?;
    Ok(observe_var(x_t, &Var::constant(mask.coverage.clone()), &noise)?.into_value())
}

/// The human-visible watermarked image `(1 - W) ⊙ x_T + W·tone`.
pub fn compose_display<S: Real>(x_t: &Tensor<S>, mask: &SoftMask<S>, tone: f64) -> Result<Tensor<S>> {
    check_same("compose_display", x_t.shape(), mask.coverage.shape())?;
    let tone = S::lit(tone);
    x_t.zip_with(&mask.coverage, "compose_display", |x, w| (S::one() - w) * x + w * tone)
}

/// `R(m) = ‖m‖₁`, which is the plain sum for a non-negative watermark.
pub fn size_regularizer_var<S: Real>(m: &Var<S>) -> Result<Var<S>> {
    m.sum()
}

pub fn size_regularizer<S: Real>(m: &Tensor<S>) -> S {
    m.sum()
}

#[cfg(test)]
mod tests;

//! The finite-difference oracle suites behind `harvim gradcheck` and the
//! acceptance tests. Every check runs in 64-bit.

use crate::autodiff::gradcheck::{check_core_ops, finite_diff_grad, relative_error, CheckOutcome};
use crate::autodiff::{grad, Tape, Var};
use crate::error::Result;
use crate::flow::{FlowConfig, FlowModel};
use crate::harvim::{meta_grad, unroll, HarvimConfig, MetaMode, RoundInputs};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::watermark::{GlyphAtlas, GlyphSource, ParamVars, WatermarkGenerator, WatermarkParams};

pub const CORE_TOLERANCE: f64 = 1e-4;
pub const META_TOLERANCE: f64 = 1e-3;
/// Probe step for the watermark checks; kinks closer than ten steps are skipped.
const STEP: f64 = 1e-6;

/// Three 3×3 glyphs, small enough for an 8×8 canvas.
pub fn tiny_atlas() -> GlyphAtlas {
    let glyphs = [
        ('A', [1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]),
        ('B', [0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0]),
        ('C', [0.2, 0.9, 0.4, 0.7, 0.0, 1.0, 0.5, 0.3, 0.8]),
    ];
    GlyphAtlas::new(
        glyphs
            .iter()
            .map(|(c, v)| (*c, Tensor::from_f64([3, 3], v).expect("3x3 glyph")))
            .collect(),
    )
    .expect("valid atlas")
}

/// Random parameters whose bilinear weights stay clear of their kinks.
fn smooth_params(generator: &WatermarkGenerator<f64>, glyphs: &[char], rng: &mut SeededRng) -> WatermarkParams {
    let (lo, hi) = generator.renderer().log_scale_bounds();
    loop {
        let p = WatermarkParams {
            glyph: GlyphSource::Atlas(glyphs[rng.below(glyphs.len())]),
            raw_left: rng.uniform_range(-3.0, 3.0),
            raw_bottom: rng.uniform_range(-3.0, 3.0),
            log_scale: rng.uniform_range(lo + 0.02, hi - 0.02),
        };
        if generator.renderer().kink_margin(&p) > 10.0 * STEP * 32.0 {
            return p;
        }
    }
}

fn bump(p: &WatermarkParams, i: usize, d: f64) -> WatermarkParams {
    let mut q = p.clone();
    match i {
        0 => q.raw_left += d,
        1 => q.raw_bottom += d,
        _ => q.log_scale += d,
    }
    q
}

fn param_fd(p: &WatermarkParams, mut f: impl FnMut(&WatermarkParams) -> Result<f64>) -> Result<Vec<f64>> {
    (0..3)
        .map(|i| Ok((f(&bump(p, i, STEP))? - f(&bump(p, i, -STEP))?) / (2.0 * STEP)))
        .collect()
}

/// `∇ log p(x)` of randomly initialized flows against central differences.
pub fn check_flow_gradients(cases: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let mut out = CheckOutcome::new("flow grad_log_prob", CORE_TOLERANCE);
    let mut flow = None;
    for c in 0..cases {
        if c % 10 == 0 {
            let dim = 2 + rng.below(7);
            flow = Some(FlowModel::<f64>::with_output_std(&FlowConfig::toy(dim, 4, 12), &mut rng, 0.5)?);
        }
        let flow = flow.as_ref().expect("flow");
        let x: Tensor<f64> = rng.normal_tensor([flow.dim()], 1.0);
        let analytic = flow.grad_log_prob(&x)?;
        let numeric = finite_diff_grad(|p| flow.log_prob(p), &x, 1e-5)?;
        out.record(relative_error(analytic.data(), numeric.data()));
    }
    Ok(out)
}

/// Gradients of a random weighting of the rendered watermark in every placement parameter.
pub fn check_render_gradients(cases: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let generator = WatermarkGenerator::<f64>::new(32)?;
    let glyphs: Vec<char> = generator.atlas().chars().collect();
    let mut out = CheckOutcome::new("render parameters", CORE_TOLERANCE);
    for _ in 0..cases {
        let p = smooth_params(&generator, &glyphs, &mut rng);
        let w: Tensor<f64> = rng.uniform_tensor([32 * 32], -1.0, 1.0);
        let tape = Tape::new();
        let vars = ParamVars::leaves(&p, &tape);
        let root = generator.render_var(&p, &vars)?.mul(&Var::constant(w.clone()))?.sum()?;
        let analytic: Vec<f64> = grad(&root, &vars.all(), false)?
            .iter()
            .map(|g| g.item())
            .collect::<Result<_>>()?;
        let numeric = param_fd(&p, |q| Ok(generator.render(q)?.mul(&w)?.sum()))?;
        out.record(relative_error(&analytic, &numeric));
    }
    Ok(out)
}

/// The exact-K1 meta-gradient against central differences of the whole
/// pipeline (render, mask, observe, one ascent step, upper loss) on 8×8
/// problems with the noise held fixed.
pub fn check_meta_gradients(cases: usize, seed: u64) -> Result<CheckOutcome> {
    const SIDE: usize = 8;
    let mut rng = SeededRng::new(seed);
    let generator = WatermarkGenerator::<f64>::with_atlas(SIDE, tiny_atlas())?;
    let glyphs: Vec<char> = generator.atlas().chars().collect();
    let mut out = CheckOutcome::new("meta-gradient (exact-K1)", META_TOLERANCE);
    let config = HarvimConfig {
        mode: MetaMode::ExactK1,
        inner_steps: 1,
        step_size: 1e-2,
        reg_coeff: 0.5,
        ..Default::default()
    };
    let mut prior = None;
    for c in 0..cases {
        if c % 10 == 0 {
            prior = Some(FlowModel::<f64>::with_output_std(
                &FlowConfig::toy(SIDE * SIDE, 2, 16),
                &mut rng,
                0.2,
            )?);
        }
        let prior = prior.as_ref().expect("prior");
        let truth: Tensor<f64> = rng.uniform_tensor([SIDE * SIDE], 0.1, 0.9);
        let previous = truth.add(&rng.normal_tensor([SIDE * SIDE], 0.1))?;
        let noise = rng.normal_tensor([SIDE * SIDE], 0.05);
        let inputs = RoundInputs {
            generator: &generator,
            prior,
            truth: &truth,
            previous: &previous,
            noise: &noise,
            lambda: rng.uniform(),
        };
        let p = smooth_params(&generator, &glyphs, &mut rng);
        let (g, _) = meta_grad(&inputs, &p, &config)?;
        let numeric = param_fd(&p, |q| unroll(&inputs, q, &ParamVars::constant(q), &config)?.loss.item())?;
        out.record(relative_error(&g.to_vec(), &numeric));
    }
    Ok(out)
}

/// Every suite with `cases` randomized cases each.
pub fn run_all(cases: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_core_ops(cases, seed)?;
    out.push(check_flow_gradients(cases, seed.wrapping_add(1))?);
    out.push(check_render_gradients(cases, seed.wrapping_add(2))?);
    out.push(check_meta_gradients(cases, seed.wrapping_add(3))?);
    Ok(out)
}

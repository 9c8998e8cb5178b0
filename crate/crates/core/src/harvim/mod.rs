//! The outer loop: learn watermark parameters whose inpainting
//! reconstruction is as poor as possible, by differentiating through the
//! unrolled inner ascent steps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::autodiff::{grad, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{psnr, psnr_var};
use crate::flow::FlowModel;
use crate::nn::AdamW;
use crate::rng::SeededRng;
use crate::solver::{mle_solve, InverseProblem, SolveState};
use crate::tensor::{Real, Tensor};
use crate::watermark::{
    draw_noise, observe_var, ratio_to_raw, size_regularizer_var, soft_mask, soft_mask_var, GlyphSource, ParamVars,
    WatermarkGenerator, WatermarkParams, ALPHA, BETA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    /// One unrolled step; exact because the prior gradient at the fixed
    /// previous iterate does not depend on the watermark.
    ExactK1,
    /// `K` steps with second-order terms through intermediate iterates dropped.
    FirstOrder,
    /// `K` steps, exact through Hessian-vector products of the prior.
    Hvp,
}

impl fmt::Display for MetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaMode::ExactK1 => "exact-k1",
            MetaMode::FirstOrder => "first-order",
            MetaMode::Hvp => "hvp",
        })
    }
}

impl FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact-k1" | "exact" => Ok(MetaMode::ExactK1),
            "first-order" => Ok(MetaMode::FirstOrder),
            "hvp" => Ok(MetaMode::Hvp),
            _ => Err(Error::Config(format!("unknown meta-gradient mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvimConfig {
    pub rounds: usize,
    pub inner_steps: usize,
    pub lambda_target: f64,
    pub sigma: f64,
    /// Inner ascent step size.
    pub step_size: f64,
    pub learning_rate: f64,
    pub reg_coeff: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grid_mle_steps: usize,
    /// MLE steps of the initial solve before round 1.
    pub init_mle_steps: usize,
    pub mode: MetaMode,
    pub seed: u64,
    pub glyph: char,
    pub initial_log_scale: f64,
}

impl Default for HarvimConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            inner_steps: 1,
            lambda_target: 1.0,
            sigma: 0.05,
            step_size: 1e-3,
            learning_rate: 0.05,
            reg_coeff: 0.001,
            alpha: ALPHA,
            beta: BETA,
            grid_mle_steps: 50,
            init_mle_steps: 50,
            mode: MetaMode::ExactK1,
            seed: 0,
            glyph: '8',
            initial_log_scale: 0.0,
        }
    }
}

impl HarvimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.inner_steps == 0 {
            return bad("inner steps must be at least 1".into());
        }
        if self.mode == MetaMode::ExactK1 && self.inner_steps != 1 {
            return bad(format!("mode exact-k1 requires one inner step, got {}", self.inner_steps));
        }
        if !(self.reg_coeff >= 0.0) {
            return bad(format!("regularizer coefficient must be non-negative, got {}", self.reg_coeff));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("step size", self.step_size),
            ("learning rate", self.learning_rate),
            ("beta", self.beta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lambda_target >= 0.0) {
            return bad(format!("target lambda must be non-negative, got {}", self.lambda_target));
        }
        if self.grid_mle_steps == 0 || self.init_mle_steps == 0 {
            return bad("MLE step counts must be at least 1".into());
        }
        Ok(())
    }

    pub fn lambda(&self, t: usize) -> f64 {
        if t >= self.rounds {
            self.lambda_target
        } else {
            self.lambda_target * t as f64 / self.rounds as f64
        }
    }
}

/// `s(x̃, x_T) + c·R(m)/n` with `s` the PSNR.
pub fn upper_loss<S: Real>(x: &Tensor<S>, truth: &Tensor<S>, m: &Tensor<S>, c: f64) -> Result<f64> {
    Ok(psnr(x, truth)? + c * m.sum().as_f64() / m.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub raw_left: f64,
    pub raw_bottom: f64,
    pub log_scale: f64,
    pub latent: Option<Vec<f64>>,
    pub norm: f64,
    pub mode: MetaMode,
}

impl MetaGradient {
    /// `[raw_left, raw_bottom, log_scale, latent...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.raw_left, self.raw_bottom, self.log_scale];
        v.extend(self.latent.iter().flatten());
        v
    }
}

/// Everything one round of the outer problem needs, held fixed while differentiating.
pub struct RoundInputs<'a, S: Real> {
    pub generator: &'a WatermarkGenerator<S>,
    pub prior: &'a FlowModel<S>,
    pub truth: &'a Tensor<S>,
    /// `x̃_{t-1}`, a constant of this round.
    pub previous: &'a Tensor<S>,
    pub noise: &'a Tensor<S>,
    pub lambda: f64,
}

/// Forward pass of one round: `(upper loss, x̃_t, m)`, all tracked.
pub struct Unrolled<S: Real> {
    pub loss: Var<S>,
    pub similarity: Var<S>,
    pub regularizer: Var<S>,
    pub x: Var<S>,
    pub m: Var<S>,
    /// Observation of this round and its soft mask `W`.
    pub y: Var<S>,
    pub coverage: Var<S>,
}

/// Builds `x̃_t = x̃_{t-1} + Σ_k η·∇ₓ objective` with `y`, `W` live in the
/// parameters, then the upper loss on top.
pub fn unroll<S: Real>(
    inputs: &RoundInputs<S>,
    params: &WatermarkParams,
    vars: &ParamVars<S>,
    config: &HarvimConfig,
) -> Result<Unrolled<S>> {
    let m = inputs.generator.render_var(params, vars)?;
    let w = soft_mask_var(&m, config.alpha, config.beta)?;
    let a = w.neg()?.add_scalar(S::one())?;
    let y = observe_var(inputs.truth, &w, inputs.noise)?;
    let inv_var = S::lit(1.0 / (config.sigma * config.sigma));
    let eta = S::lit(config.step_size);
    let lambda = S::lit(inputs.lambda);

    let mut x = Var::constant(inputs.previous.clone());
    for k in 0..config.inner_steps {
        let at = if k > 0 && config.mode == MetaMode::FirstOrder {
            x.detach()
        } else {
            x.clone()
        };
        let data = a.mul(&y.sub(&a.mul(&at)?)?)?.mul_scalar(inv_var)?;
        let prior = if inputs.lambda == 0.0 {
            None
        } else if at.requires_grad() {
            let lp = inputs.prior.log_prob_var(&at)?;
            Some(grad(&lp, &[&at], true)?.remove(0))
        } else {
            Some(Var::constant(inputs.prior.grad_log_prob(at.value())?))
        };
        let step = match prior {
            Some(p) => data.add(&p.mul_scalar(lambda)?)?,
            None => data,
        };
        x = x.add(&step.mul_scalar(eta)?)?;
    }
    let similarity = psnr_var(&x, inputs.truth)?;
    let regularizer = size_regularizer_var(&m)?;
    let n = S::lit(m.len() as f64);
    let loss = similarity.add(&regularizer.mul_scalar(S::lit(config.reg_coeff) / n)?)?;
    Ok(Unrolled {
        loss,
        similarity,
        regularizer,
        x,
        m,
        y,
        coverage: w,
    })
}

/// Gradient of the round's upper loss in every watermark parameter.
pub fn meta_grad<S: Real>(
    inputs: &RoundInputs<S>,
    params: &WatermarkParams,
    config: &HarvimConfig,
) -> Result<(MetaGradient, Unrolled<S>)> {
    config.validate()?;
    let tape = Tape::new();
    let vars = ParamVars::leaves(params, &tape);
    let out = unroll(inputs, params, &vars, config)?;
    let grads = grad(&out.loss, &vars.all(), false)?;
    let scalar = |v: &Var<S>| v.value().data()[0].as_f64();
    let latent = vars.latent.as_ref().map(|_| grads[3].value().to_f64_vec());
    let mut g = MetaGradient {
        raw_left: scalar(&grads[0]),
        raw_bottom: scalar(&grads[1]),
        log_scale: scalar(&grads[2]),
        latent,
        norm: 0.0,
        mode: config.mode,
    };
    let v = g.to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "meta_grad" });
    }
    g.norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((g, out))
}

/// Reconstruction PSNR of each of the nine grid locations.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCandidate {
    pub p_left: f64,
    pub p_bottom: f64,
    pub psnr: f64,
}

/// Scores `(p_left, p_bottom) ∈ {0, ½, 1}²` in lexicographic order by the
/// PSNR of a short MLE reconstruction. Edge ratios are realized as raw
/// values `±EDGE_RAW`.
pub fn grid_search<S: Real>(
    truth: &Tensor<S>,
    config: &HarvimConfig,
    prior: &FlowModel<S>,
    generator: &WatermarkGenerator<S>,
    glyph: &GlyphSource,
    rng: &mut SeededRng,
) -> Result<Vec<GridCandidate>> {
    config.validate()?;
    let noise = draw_noise(truth.shape(), config.sigma, rng)?;
    let mut cells = Vec::with_capacity(9);
    let (mut ys, mut ws) = (Vec::with_capacity(9), Vec::with_capacity(9));
    for pl in [0.0, 0.5, 1.0] {
        for pb in [0.0, 0.5, 1.0] {
            let params = WatermarkParams::new(glyph.clone(), pl, pb, config.initial_log_scale);
            let m = generator.render(&params)?;
            let mask = soft_mask(&m, config.alpha, config.beta)?;
            ys.push(observe_var(truth, &Var::constant(mask.coverage.clone()), &noise)?.into_value());
            ws.push(mask.coverage);
            cells.push((pl, pb));
        }
    }
    // the nine candidates are independent rows of one batched solve
    let problem = InverseProblem::new(Tensor::stack_rows(&ys)?, &Tensor::stack_rows(&ws)?, config.sigma, prior)?;
    let x = mle_solve(&problem, config.grid_mle_steps, config.step_size, &problem.default_init()?)?;
    cells
        .into_iter()
        .enumerate()
        .map(|(r, (pl, pb))| {
            Ok(GridCandidate {
                p_left: pl,
                p_bottom: pb,
                psnr: psnr(&x.row(r)?, truth)?,
            })
        })
        .collect()
}

/// The grid location with the lowest reconstruction PSNR; ties keep the earlier one.
pub fn grid_init<S: Real>(
    truth: &Tensor<S>,
    config: &HarvimConfig,
    prior: &FlowModel<S>,
    generator: &WatermarkGenerator<S>,
    glyph: &GlyphSource,
    rng: &mut SeededRng,
) -> Result<WatermarkParams> {
    let grid = grid_search(truth, config, prior, generator, glyph, rng)?;
    let mut best = &grid[0];
    for c in &grid[1..] {
        if c.psnr < best.psnr {
            best = c;
        }
    }
    Ok(WatermarkParams::new(glyph.clone(), best.p_left, best.p_bottom, config.initial_log_scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub round: usize,
    pub lambda: f64,
    pub similarity: f64,
    pub regularizer: f64,
    pub upper_loss: f64,
    pub grad_norm: f64,
    pub p_left: f64,
    pub p_bottom: f64,
    pub scale: f64,
}

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "lambda",
        "similarity",
        "regularizer",
        "upper_loss",
        "grad_norm",
        "p_left",
        "p_bottom",
        "scale",
    ])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.lambda.to_string(),
            r.similarity.to_string(),
            r.regularizer.to_string(),
            r.upper_loss.to_string(),
            r.grad_norm.to_string(),
            r.p_left.to_string(),
            r.p_bottom.to_string(),
            r.scale.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Learner state between rounds.
#[derive(Debug, Clone)]
pub struct HarvimState<S: Real = f32> {
    pub params: WatermarkParams,
    pub solve: SolveState<S>,
    pub optimizer: AdamW,
    pub audit: Vec<AuditRow>,
}

#[derive(Debug, Clone)]
pub struct HarvimOutcome<S: Real = f32> {
    pub initial: WatermarkParams,
    pub params: WatermarkParams,
    /// Final rendered watermark `m`.
    pub watermark: Tensor<S>,
    pub state: HarvimState<S>,
}

impl<S: Real> HarvimOutcome<S> {
    pub fn audit(&self) -> &[AuditRow] {
        &self.state.audit
    }
}

fn param_tensors<S: Real>(p: &WatermarkParams) -> Vec<Tensor<S>> {
    let mut v = vec![
        Tensor::scalar(S::lit(p.raw_left)),
        Tensor::scalar(S::lit(p.raw_bottom)),
        Tensor::scalar(S::lit(p.log_scale)),
    ];
    if let Some(z) = p.latent() {
        v.push(Tensor::from_f64([z.len()], z).expect("finite latent"));
    }
    v
}

fn grad_tensors<S: Real>(g: &MetaGradient) -> Result<Vec<Tensor<S>>> {
    let mut v = vec![
        Tensor::scalar(S::lit(g.raw_left)),
        Tensor::scalar(S::lit(g.raw_bottom)),
        Tensor::scalar(S::lit(g.log_scale)),
    ];
    if let Some(z) = &g.latent {
        v.push(Tensor::from_f64([z.len()], z)?);
    }
    Ok(v)
}

fn apply_update<S: Real>(
    params: &mut WatermarkParams,
    g: &MetaGradient,
    opt: &mut AdamW,
    generator: &WatermarkGenerator<S>,
) -> Result<()> {
    let mut p = param_tensors::<S>(params);
    opt.step(&mut p, &grad_tensors::<S>(g)?)?;
    params.raw_left = p[0].data()[0].as_f64();
    params.raw_bottom = p[1].data()[0].as_f64();
    params.log_scale = generator.renderer().clamp_log_scale(p[2].data()[0].as_f64());
    if let GlyphSource::Latent(z) = &mut params.glyph {
        *z = p[3].to_f64_vec();
    }
    Ok(())
}

/// Learns a watermark for `truth` (a flat `[n]` image).
///
/// Grid initialization, an MLE solve at λ = 0, then `T` rounds of: λ update,
/// fresh noise, `K` unrolled ascent steps, meta-gradient, AdamW update.
/// `x̃_{t-1}` enters each round as a constant.
pub fn run<S: Real>(
    truth: &Tensor<S>,
    config: &HarvimConfig,
    prior: &FlowModel<S>,
    generator: &WatermarkGenerator<S>,
    glyph: &GlyphSource,
) -> Result<HarvimOutcome<S>> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let mut grid_rng = rng.derive(0);
    let initial = grid_init(truth, config, prior, generator, glyph, &mut grid_rng)?;
    let mut params = initial.clone();

    let m0 = generator.render(&params)?;
    let mask = soft_mask(&m0, config.alpha, config.beta)?;
    let noise = draw_noise(truth.shape(), config.sigma, &mut rng)?;
    let y0 = observe_var(truth, &Var::constant(mask.coverage.clone()), &noise)?.into_value();
    let problem = InverseProblem::new(y0, &mask.coverage, config.sigma, prior)?;
    let x0 = mle_solve(&problem, config.init_mle_steps, config.step_size, &problem.default_init()?)?;
    let mut state = HarvimState {
        params: params.clone(),
        solve: SolveState {
            objective: problem.objective(&x0, 0.0)?,
            x: x0,
            lambda: 0.0,
            round: 0,
        },
        optimizer: AdamW::new(config.learning_rate),
        audit: Vec::with_capacity(config.rounds),
    };

    for t in 1..=config.rounds {
        let lambda = config.lambda(t);
        let noise = draw_noise(truth.shape(), config.sigma, &mut rng)?;
        let inputs = RoundInputs {
            generator,
            prior,
            truth,
            previous: &state.solve.x,
            noise: &noise,
            lambda,
        };
        let (g, out) = meta_grad(&inputs, &params, config)?;
        let similarity = out.similarity.item()?.as_f64();
        let regularizer = out.regularizer.item()?.as_f64();
        state.audit.push(AuditRow {
            round: t,
            lambda,
            similarity,
            regularizer,
            upper_loss: out.loss.item()?.as_f64(),
            grad_norm: g.norm,
            p_left: params.p_left(),
            p_bottom: params.p_bottom(),
            scale: generator.renderer().clamp_log_scale(params.log_scale).exp(),
        });
        let x = out.x.into_value();
        let problem = InverseProblem::new(out.y.into_value(), out.coverage.value(), config.sigma, prior)?;
        state.solve = SolveState {
            objective: problem.objective(&x, lambda)?,
            x,
            lambda,
            round: t,
        };
        apply_update(&mut params, &g, &mut state.optimizer, generator)?;
    }
    state.params = params.clone();
    let watermark = generator.render(&params)?;
    Ok(HarvimOutcome {
        initial,
        params,
        watermark,
        state,
    })
}

/// Watermark parameters with uniformly random padding ratios and the given
/// glyph and scale: the baseline arm of the gauntlet.
pub fn random_placement(glyph: GlyphSource, log_scale: f64, rng: &mut SeededRng) -> WatermarkParams {
    let (pl, pb) = (rng.uniform(), rng.uniform());
    WatermarkParams {
        glyph,
        raw_left: ratio_to_raw(pl),
        raw_bottom: ratio_to_raw(pb),
        log_scale,
    }
}

//! Paired removal gauntlet: learned versus randomly placed watermarks under
//! a set of removers.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::harvim::{self, random_placement, HarvimConfig};
use crate::rng::SeededRng;
use crate::solver::{continuation_solve, ContinuationSchedule, InverseProblem};
use crate::tensor::{Real, Tensor};
use crate::watermark::{compose_display, draw_noise, soft_mask, GlyphSource, SoftMask, WatermarkGenerator, WatermarkParams};

use super::inpaint::{heat_diffusion_inpaint, BlindThreshold, DEFAULT_HEAT_ITERATIONS};
use super::metrics::{psnr, ssim};

/// Name of the pseudo-remover whose rows score the observation itself.
pub const OBSERVATION: &str = "observation";

#[derive(Debug, Clone, PartialEq)]
pub enum RemoverKind {
    /// Continuation with the shared flow prior; knows the exact mask.
    FlowR(ContinuationSchedule),
    /// Harmonic fill of the binarized mask.
    HeatDiffusionInpaint { iterations: usize },
    /// Sees only the displayed image; never the mask. `tone` is the glyph
    /// tone it searches for, `None` meaning it is told the true one.
    BlindThresholdInpaint {
        band: f64,
        min_component: usize,
        iterations: usize,
        tone: Option<f64>,
    },
}

impl RemoverKind {
    pub fn flow_r() -> Self {
        RemoverKind::FlowR(Self::flow_r_schedule())
    }

    /// A quarter of the solver's default step, with four times the steps.
    /// Learned 32×32 priors reach Hessian eigenvalues of a few thousand,
    /// past the 2/η bound of the default.
    pub fn flow_r_schedule() -> ContinuationSchedule {
        ContinuationSchedule {
            inner_steps: 20,
            step_size: 2.5e-4,
            ..ContinuationSchedule::default()
        }
    }

    pub fn heat() -> Self {
        RemoverKind::HeatDiffusionInpaint {
            iterations: DEFAULT_HEAT_ITERATIONS,
        }
    }

    pub fn blind() -> Self {
        let d = BlindThreshold::new(0.0);
        RemoverKind::BlindThresholdInpaint {
            band: d.band,
            min_component: d.min_component,
            iterations: d.iterations,
            tone: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RemoverKind::FlowR(_) => "flow-r",
            RemoverKind::HeatDiffusionInpaint { .. } => "heat-diffusion",
            RemoverKind::BlindThresholdInpaint { .. } => "blind-threshold",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RemoverKind::FlowR(s) => s.validate(),
            RemoverKind::HeatDiffusionInpaint { iterations } | RemoverKind::BlindThresholdInpaint { iterations, .. }
                if *iterations == 0 =>
            {
                Err(Error::Config(format!("{}: iterations must be at least 1", self.name())))
            }
            RemoverKind::BlindThresholdInpaint { band, .. } if !(*band >= 0.0) => {
                Err(Error::Config(format!("blind-threshold: band must be non-negative, got {band}")))
            }
            _ => Ok(()),
        }
    }
}

/// Parses a remover name with default settings.
impl FromStr for RemoverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "flow-r" => Ok(Self::flow_r()),
            "heat-diffusion" => Ok(Self::heat()),
            "blind-threshold" => Ok(Self::blind()),
            other => Err(Error::Config(format!("unknown remover {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Random,
    Harvim,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Random, Arm::Harvim];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Random => "random",
            Arm::Harvim => "harvim",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Arm::Random),
            "harvim" => Ok(Arm::Harvim),
            _ => Err(Error::invalid(format!("unknown watermark arm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Psnr,
    Ssim,
    VPsnr,
    VSsim,
}

impl Column {
    pub fn name(self) -> &'static str {
        match self {
            Column::Psnr => "psnr",
            Column::Ssim => "ssim",
            Column::VPsnr => "v_psnr",
            Column::VSsim => "v_ssim",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub image_id: String,
    pub arm: Arm,
    pub remover: String,
    pub psnr: f64,
    pub ssim: f64,
    pub v_psnr: f64,
    pub v_ssim: f64,
}

impl ReportRow {
    pub fn get(&self, c: Column) -> f64 {
        match c {
            Column::Psnr => self.psnr,
            Column::Ssim => self.ssim,
            Column::VPsnr => self.v_psnr,
            Column::VSsim => self.v_ssim,
        }
    }

    fn score<S: Real>(id: &str, arm: Arm, remover: &str, recon: &Tensor<S>, input: &Tensor<S>, truth: &Tensor<S>) -> Result<Self> {
        let (p, s) = (psnr(recon, truth)?, ssim(recon, truth)?);
        Ok(Self {
            image_id: id.to_string(),
            arm,
            remover: remover.to_string(),
            psnr: p,
            ssim: s,
            v_psnr: p - psnr(input, truth)?,
            v_ssim: s - ssim(input, truth)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingCell {
    pub image_id: String,
    pub remover: String,
    pub reason: String,
}

/// Mean and standard error (sample std / √count) of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se, count: n })
    }
}

/// Paired comparison of the two arms for one remover and column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Improvement {
    /// `mean_random − mean_harvim` over the paired images.
    pub imp: f64,
    pub se: f64,
    /// Images where the learned watermark scored lower, higher, equal.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test of "random scores higher", ties dropped.
    pub p_value: f64,
}

/// `P(X ≥ k)` for `X ~ Binomial(n, ½)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut coeff = 1.0f64;
    for i in 0..=n {
        if i > 0 {
            coeff = coeff * (n - i + 1) as f64 / i as f64;
        }
        if i >= k {
            total += coeff;
        }
    }
    total / 2f64.powi(n as i32)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub missing: Vec<MissingCell>,
}

const HEADER: [&str; 7] = ["image_id", "arm", "remover", "psnr", "ssim", "v_psnr", "v_ssim"];

impl MetricsReport {
    /// Removers in order of first appearance, observation first.
    pub fn removers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.remover) {
                out.push(r.remover.clone());
            }
        }
        out
    }

    fn values(&self, remover: &str, arm: Arm, c: Column) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.remover == remover && r.arm == arm)
            .map(|r| r.get(c))
            .collect()
    }

    pub fn aggregate(&self, remover: &str, arm: Arm, c: Column) -> Option<Aggregate> {
        Aggregate::of(&self.values(remover, arm, c))
    }

    /// Paired by image id; images lacking either arm are skipped.
    pub fn improvement(&self, remover: &str, c: Column) -> Option<Improvement> {
        let mut diffs = Vec::new();
        for r in self.rows.iter().filter(|r| r.remover == remover && r.arm == Arm::Random) {
            if let Some(h) = self
                .rows
                .iter()
                .find(|h| h.remover == remover && h.arm == Arm::Harvim && h.image_id == r.image_id)
            {
                diffs.push(r.get(c) - h.get(c));
            }
        }
        let agg = Aggregate::of(&diffs)?;
        let wins = diffs.iter().filter(|d| **d > 0.0).count();
        let losses = diffs.iter().filter(|d| **d < 0.0).count();
        Some(Improvement {
            imp: agg.mean,
            se: agg.se,
            wins,
            losses,
            ties: diffs.len() - wins - losses,
            p_value: sign_test_p(wins, wins + losses),
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                r.arm.name().to_string(),
                r.remover.clone(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                r.v_psnr.to_string(),
                r.v_ssim.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Rebuilds a report from its CSV rows.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != HEADER {
            return Err(Error::invalid(format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad {} value {:?}", HEADER[i], &rec[i])))
            };
            rows.push(ReportRow {
                image_id: rec[0].to_string(),
                arm: rec[1].parse()?,
                remover: rec[2].to_string(),
                psnr: num(3)?,
                ssim: num(4)?,
                v_psnr: num(5)?,
                v_ssim: num(6)?,
            });
        }
        Ok(Self { rows, missing: Vec::new() })
    }

    /// Plain-text table: one row per remover, Random / HARVIM / Imp for each
    /// of v_PSNR and v_SSIM.
    pub fn table(&self) -> String {
        let cols = [Column::VPsnr, Column::VSsim];
        let cell = |a: Option<Aggregate>, digits: usize| match a {
            Some(a) => format!("{:.*} ± {:.*}", digits, a.mean, digits, a.se),
            None => "-".to_string(),
        };
        let mut lines: Vec<Vec<String>> = vec![vec![
            "Remover".into(),
            "v_PSNR Random".into(),
            "v_PSNR HARVIM".into(),
            "Imp".into(),
            "v_SSIM Random".into(),
            "v_SSIM HARVIM".into(),
            "Imp".into(),
        ]];
        for rem in self.removers() {
            let mut line = vec![rem.clone()];
            for (c, digits) in cols.iter().zip([2, 3]) {
                line.push(cell(self.aggregate(&rem, Arm::Random, *c), digits));
                line.push(cell(self.aggregate(&rem, Arm::Harvim, *c), digits));
                line.push(match self.improvement(&rem, *c) {
                    Some(i) => format!("{:.*}", digits, i.imp),
                    None => "-".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..7)
            .map(|k| lines.iter().map(|l| l[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    if k == 0 {
                        format!("{s:<w$}", w = widths[k])
                    } else {
                        format!("{s:>w$}", w = widths[k])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "{}", rule.join("-+-"));
            }
        }
        for m in &self.missing {
            let _ = writeln!(out, "missing: {} / {}: {}", m.image_id, m.remover, m.reason);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GauntletConfig {
    pub harvim: HarvimConfig,
    pub removers: Vec<RemoverKind>,
    pub seed: u64,
    /// Glyph tone of the displayed watermark; `None` camouflages it at the
    /// image mean.
    pub tone: Option<f64>,
}

impl Default for GauntletConfig {
    fn default() -> Self {
        Self {
            harvim: HarvimConfig::default(),
            removers: vec![RemoverKind::flow_r(), RemoverKind::heat(), RemoverKind::blind()],
            seed: 0,
            tone: None,
        }
    }
}

/// One watermarked version of one image.
#[derive(Debug, Clone)]
pub struct ArmCase<S: Real> {
    pub params: WatermarkParams,
    pub mask: SoftMask<S>,
    /// Noisy observation `(1 − W)⊙x + e`, `[h, w]`.
    pub observation: Tensor<S>,
    /// The observation with the glyph drawn in: `(1 − W)⊙x + W·tone + e`.
    pub display: Tensor<S>,
    pub tone: f64,
}

#[derive(Debug, Clone)]
pub struct ImageCase<S: Real> {
    pub id: String,
    pub truth: Tensor<S>,
    pub random: ArmCase<S>,
    pub harvim: ArmCase<S>,
    pub audit: Vec<harvim::AuditRow>,
}

impl<S: Real> ImageCase<S> {
    pub fn arm(&self, arm: Arm) -> &ArmCase<S> {
        match arm {
            Arm::Random => &self.random,
            Arm::Harvim => &self.harvim,
        }
    }
}

fn arm_case<S: Real>(
    truth: &Tensor<S>,
    params: WatermarkParams,
    generator: &WatermarkGenerator<S>,
    config: &GauntletConfig,
    noise: &Tensor<S>,
) -> Result<ArmCase<S>> {
    let shape = truth.shape().to_vec();
    let m = generator.render(&params)?.reshape(shape.clone())?;
    let mask = soft_mask(&m, config.harvim.alpha, config.harvim.beta)?;
    let observation = mask.observed()?.mul(truth)?.add(noise)?;
    let tone = config.tone.unwrap_or_else(|| truth.mean().as_f64());
    let display = compose_display(truth, &mask, tone)?.add(noise)?;
    Ok(ArmCase {
        params,
        mask,
        observation,
        display,
        tone,
    })
}

/// Learns the HARVIM watermark for one image and draws its random twin.
///
/// Both arms share the glyph, the final scale and the observation noise.
pub fn prepare_case<S: Real>(
    id: &str,
    truth: &Tensor<S>,
    prior: &FlowModel<S>,
    generator: &WatermarkGenerator<S>,
    config: &GauntletConfig,
    rng: &mut SeededRng,
) -> Result<ImageCase<S>> {
    let n = truth.len();
    let flat = truth.reshape([n])?;
    let harvim_cfg = HarvimConfig {
        seed: rng.next_u64(),
        ..config.harvim.clone()
    };
    let glyph = GlyphSource::Atlas(config.harvim.glyph);
    let learned = harvim::run(&flat, &harvim_cfg, prior, generator, &glyph)?;
    let random = random_placement(glyph, learned.params.log_scale, rng);
    let noise = draw_noise(truth.shape(), config.harvim.sigma, rng)?;
    Ok(ImageCase {
        id: id.to_string(),
        truth: truth.clone(),
        random: arm_case(truth, random, generator, config, &noise)?,
        harvim: arm_case(truth, learned.params.clone(), generator, config, &noise)?,
        audit: learned.state.audit,
    })
}

fn solve_flow_r<S: Real>(
    rows: &[(&Tensor<S>, &Tensor<S>)],
    sigma: f64,
    prior: &FlowModel<S>,
    schedule: &ContinuationSchedule,
    inits: &[Tensor<S>],
) -> Result<Vec<Tensor<S>>> {
    let flat = |t: &Tensor<S>| t.reshape([t.len()]);
    let y = Tensor::stack_rows(&rows.iter().map(|(y, _)| flat(y)).collect::<Result<Vec<_>>>()?)?;
    let w = Tensor::stack_rows(&rows.iter().map(|(_, w)| flat(w)).collect::<Result<Vec<_>>>()?)?;
    let x0 = Tensor::stack_rows(inits)?;
    let problem = InverseProblem::new(y, &w, sigma, prior)?;
    let x = continuation_solve(&problem, schedule, &x0)?.last().x.clone();
    (0..rows.len())
        .map(|r| x.row(r)?.reshape(rows[r].0.shape().to_vec()))
        .collect()
}

/// Flow-R over every case and arm in one batch; on failure each row is
/// retried alone so one divergence costs only its own cell.
fn flow_r_all<S: Real>(
    cases: &[ImageCase<S>],
    sigma: f64,
    prior: &FlowModel<S>,
    schedule: &ContinuationSchedule,
    rng: &SeededRng,
) -> Vec<Result<Tensor<S>>> {
    let mut rows = Vec::new();
    let mut inits = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        for (a, arm) in Arm::BOTH.iter().enumerate() {
            let case = c.arm(*arm);
            let mut r = rng.derive((2 * i + a) as u64);
            let n = case.observation.len();
            let init = case
                .observation
                .reshape([n])
                .and_then(|y| y.add(&r.normal_tensor([n], 0.1)));
            rows.push((&case.observation, &case.mask.coverage));
            inits.push(init);
        }
    }
    if inits.iter().all(Result::is_ok) {
        let ok: Vec<Tensor<S>> = inits.iter().map(|r| r.as_ref().unwrap().clone()).collect();
        if let Ok(out) = solve_flow_r(&rows, sigma, prior, schedule, &ok) {
            return out.into_iter().map(Ok).collect();
        }
    }
    rows.iter()
        .zip(inits)
        .map(|(row, init)| Ok(solve_flow_r(&[*row], sigma, prior, schedule, &[init?])?.remove(0)))
        .collect()
}

fn remove_one<S: Real>(kind: &RemoverKind, case: &ArmCase<S>) -> Result<Tensor<S>> {
    match kind {
        RemoverKind::HeatDiffusionInpaint { iterations } => {
            let masked: Vec<bool> = case.mask.coverage.data().iter().map(|w| w.as_f64() >= 0.5).collect();
            heat_diffusion_inpaint(&case.observation, &masked, *iterations)
        }
        RemoverKind::BlindThresholdInpaint {
            band,
            min_component,
            iterations,
            tone,
        } => {
            let det = BlindThreshold {
                tone: tone.unwrap_or(case.tone),
                band: *band,
                min_component: *min_component,
                iterations: *iterations,
            };
            det.remove(&case.display)
        }
        RemoverKind::FlowR(_) => unreachable!("flow-r runs batched"),
    }
}

/// Scores every (image, arm, remover) cell of already prepared cases.
pub fn score_cases<S: Real>(
    cases: &[ImageCase<S>],
    prior: &FlowModel<S>,
    config: &GauntletConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for c in cases {
        for arm in Arm::BOTH {
            let a = c.arm(arm);
            report
                .rows
                .push(ReportRow::score(&c.id, arm, OBSERVATION, &a.observation, &a.observation, &c.truth)?);
        }
    }
    let root = SeededRng::new(config.seed).derive(1 << 32);
    for (k, kind) in config.removers.iter().enumerate() {
        let recons: Vec<Result<Tensor<S>>> = match kind {
            RemoverKind::FlowR(schedule) => flow_r_all(cases, config.harvim.sigma, prior, schedule, &root.derive(k as u64)),
            _ => cases
                .iter()
                .flat_map(|c| Arm::BOTH.map(|arm| remove_one(kind, c.arm(arm))))
                .collect(),
        };
        for (i, c) in cases.iter().enumerate() {
            let pair = [&recons[2 * i], &recons[2 * i + 1]];
            let scored: std::result::Result<Vec<ReportRow>, String> = Arm::BOTH
                .iter()
                .zip(pair)
                .map(|(arm, recon)| {
                    let recon = recon.as_ref().map_err(ToString::to_string)?;
                    let a = c.arm(*arm);
                    let input = match kind {
                        RemoverKind::BlindThresholdInpaint { .. } => &a.display,
                        _ => &a.observation,
                    };
                    ReportRow::score(&c.id, *arm, kind.name(), recon, input, &c.truth).map_err(|e| e.to_string())
                })
                .collect();
            match scored {
                Ok(rows) => report.rows.extend(rows),
                Err(e) => report.missing.push(MissingCell {
                    image_id: c.id.clone(),
                    remover: kind.name().to_string(),
                    reason: e,
                }),
            }
        }
    }
    Ok(report)
}

/// The full protocol: learn a watermark per image, draw its random twin,
/// apply every remover to both, and report paired metrics.
///
/// Images whose watermark learning fails are reported missing for every
/// remover; a failing remover only loses its own cell.
pub fn run_gauntlet<S: Real>(
    images: &[(String, Tensor<S>)],
    prior: &FlowModel<S>,
    generator: &WatermarkGenerator<S>,
    config: &GauntletConfig,
) -> Result<(MetricsReport, Vec<ImageCase<S>>)> {
    if images.is_empty() {
        return Err(Error::invalid("the gauntlet needs at least one image"));
    }
    config.harvim.validate()?;
    for r in &config.removers {
        r.validate()?;
    }
    let root = SeededRng::new(config.seed);
    let prepared: Vec<(String, Result<ImageCase<S>>)> = images
        .par_iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let mut rng = root.derive(i as u64);
            (id.clone(), prepare_case(id, img, prior, generator, config, &mut rng))
        })
        .collect();
    let mut cases = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in prepared {
        match r {
            Ok(c) => cases.push(c),
            Err(e) => failed.push((id, e.to_string())),
        }
    }
    let mut report = score_cases(&cases, prior, config)?;
    for (id, reason) in failed {
        for rem in std::iter::once(OBSERVATION).chain(config.removers.iter().map(RemoverKind::name)) {
            report.missing.push(MissingCell {
                image_id: id.clone(),
                remover: rem.to_string(),
                reason: reason.clone(),
            });
        }
    }
    Ok((report, cases))
}

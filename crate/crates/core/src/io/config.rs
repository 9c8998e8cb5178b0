//! Run configuration: a UTF-8 file of `key = value` lines with `#` comments.
//!
//! Every key has a default, unknown or repeated keys are errors, and values
//! are range-checked as they are read. Command-line overrides go through
//! [`RunConfig::set`] after the file, so a flag always wins.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::RemoverKind;
use crate::flow::PriorTrainConfig;
use crate::harvim::{HarvimConfig, MetaMode};
use crate::solver::ContinuationSchedule;

use super::read_file;

/// Where a watermark's displayed tone comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tone {
    /// The mean intensity of the image it is drawn on.
    ImageMean,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub prior: PathBuf,
    /// PNG directory; `None` uses the bundled toy corpus.
    pub images: Option<PathBuf>,
    pub out: PathBuf,
    pub harvim: HarvimConfig,
    pub train: PriorTrainConfig,
    /// Procedural images generated for prior training.
    pub train_images: usize,
    pub removers: Vec<String>,
    pub flow_r: ContinuationSchedule,
    pub heat_iterations: usize,
    pub blind_band: f64,
    pub blind_min_component: usize,
    pub blind_iterations: usize,
    /// Tone the blind detector looks for; `None` tells it the true display tone.
    pub blind_tone: Option<f64>,
    pub display_tone: Tone,
}

impl Default for RunConfig {
    fn default() -> Self {
        let RemoverKind::BlindThresholdInpaint {
            band,
            min_component,
            iterations,
            tone,
        } = RemoverKind::blind()
        else {
            unreachable!()
        };
        Self {
            seed: 0,
            prior: PathBuf::from("prior.hvmf"),
            images: None,
            out: PathBuf::from("out"),
            harvim: HarvimConfig::default(),
            train: crate::data::toy_prior_config(),
            train_images: 2000,
            removers: vec!["flow-r".into(), "heat-diffusion".into(), "blind-threshold".into()],
            flow_r: RemoverKind::flow_r_schedule(),
            heat_iterations: crate::eval::inpaint::DEFAULT_HEAT_ITERATIONS,
            blind_band: band,
            blind_min_component: min_component,
            blind_iterations: iterations,
            blind_tone: tone,
            display_tone: Tone::ImageMean,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    match value {
        "" | "bundled" => None,
        p => Some(PathBuf::from(p)),
    }
}

impl RunConfig {
    /// Parses a config file body; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.harvim;
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "prior" => self.prior = PathBuf::from(value),
            "images" => self.images = path_or_none(value),
            "out" => self.out = PathBuf::from(value),
            "harvim.rounds" => h.rounds = parse_num(key, value)?,
            "harvim.inner_steps" => h.inner_steps = parse_num(key, value)?,
            "harvim.lambda" => h.lambda_target = parse_num(key, value)?,
            "harvim.sigma" => h.sigma = parse_num(key, value)?,
            "harvim.step_size" => h.step_size = parse_num(key, value)?,
            "harvim.learning_rate" => h.learning_rate = parse_num(key, value)?,
            "harvim.reg_coeff" => h.reg_coeff = parse_num(key, value)?,
            "harvim.alpha" => h.alpha = parse_num(key, value)?,
            "harvim.beta" => h.beta = parse_num(key, value)?,
            "harvim.grid_mle_steps" => h.grid_mle_steps = parse_num(key, value)?,
            "harvim.init_mle_steps" => h.init_mle_steps = parse_num(key, value)?,
            "harvim.mode" => h.mode = value.parse::<MetaMode>()?,
            "harvim.glyph" => {
                let mut chars = value.chars();
                h.glyph = match (chars.next(), chars.next()) {
                    (Some(c), None) => c,
                    _ => return Err(Error::Config(format!("{key}: expected one character, got {value:?}"))),
                }
            }
            "harvim.initial_log_scale" => h.initial_log_scale = parse_num(key, value)?,
            "train.images" => self.train_images = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "train.validation_fraction" => self.train.validation_fraction = parse_num(key, value)?,
            "train.dequantization" => self.train.dequantization = parse_num(key, value)?,
            "removers" => {
                self.removers = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                for r in &self.removers {
                    r.parse::<RemoverKind>()?;
                }
            }
            "flow_r.rounds" => self.flow_r.rounds = parse_num(key, value)?,
            "flow_r.inner_steps" => self.flow_r.inner_steps = parse_num(key, value)?,
            "flow_r.step_size" => self.flow_r.step_size = parse_num(key, value)?,
            "flow_r.lambda" => self.flow_r.lambda_target = parse_num(key, value)?,
            "flow_r.mle_steps" => self.flow_r.mle_steps = parse_num(key, value)?,
            "heat.iterations" => self.heat_iterations = parse_num(key, value)?,
            "blind.band" => self.blind_band = parse_num(key, value)?,
            "blind.min_component" => self.blind_min_component = parse_num(key, value)?,
            "blind.iterations" => self.blind_iterations = parse_num(key, value)?,
            "blind.tone" => {
                self.blind_tone = match value {
                    "display" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "display_tone" => {
                self.display_tone = match value {
                    "mean" => Tone::ImageMean,
                    v => Tone::Fixed(parse_num(key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let mut h = self.harvim.clone();
        h.seed = self.seed;
        h.validate()?;
        self.train.validate()?;
        self.flow_r.validate()?;
        if self.train_images == 0 {
            return Err(Error::Config("train.images must be at least 1".into()));
        }
        if self.heat_iterations == 0 || self.blind_iterations == 0 {
            return Err(Error::Config("inpainting iterations must be at least 1".into()));
        }
        if !(self.blind_band >= 0.0) {
            return Err(Error::Config(format!("blind.band must be non-negative, got {}", self.blind_band)));
        }
        for t in [self.blind_tone, match self.display_tone {
            Tone::Fixed(t) => Some(t),
            Tone::ImageMean => None,
        }]
        .into_iter()
        .flatten()
        {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("tones must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let h = &self.harvim;
        let t = &self.train;
        let f = &self.flow_r;
        vec![
            ("seed", self.seed.to_string()),
            ("prior", self.prior.display().to_string()),
            (
                "images",
                self.images
                    .as_ref()
                    .map_or("bundled".into(), |p| p.display().to_string()),
            ),
            ("out", self.out.display().to_string()),
            ("harvim.rounds", h.rounds.to_string()),
            ("harvim.inner_steps", h.inner_steps.to_string()),
            ("harvim.lambda", h.lambda_target.to_string()),
            ("harvim.sigma", h.sigma.to_string()),
            ("harvim.step_size", h.step_size.to_string()),
            ("harvim.learning_rate", h.learning_rate.to_string()),
            ("harvim.reg_coeff", h.reg_coeff.to_string()),
            ("harvim.alpha", h.alpha.to_string()),
            ("harvim.beta", h.beta.to_string()),
            ("harvim.grid_mle_steps", h.grid_mle_steps.to_string()),
            ("harvim.init_mle_steps", h.init_mle_steps.to_string()),
            ("harvim.mode", h.mode.to_string()),
            ("harvim.glyph", h.glyph.to_string()),
            ("harvim.initial_log_scale", h.initial_log_scale.to_string()),
            ("train.images", self.train_images.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.validation_fraction", t.validation_fraction.to_string()),
            ("train.dequantization", t.dequantization.to_string()),
            ("removers", self.removers.join(", ")),
            ("flow_r.rounds", f.rounds.to_string()),
            ("flow_r.inner_steps", f.inner_steps.to_string()),
            ("flow_r.step_size", f.step_size.to_string()),
            ("flow_r.lambda", f.lambda_target.to_string()),
            ("flow_r.mle_steps", f.mle_steps.to_string()),
            ("heat.iterations", self.heat_iterations.to_string()),
            ("blind.band", self.blind_band.to_string()),
            ("blind.min_component", self.blind_min_component.to_string()),
            ("blind.iterations", self.blind_iterations.to_string()),
            ("blind.tone", self.blind_tone.map_or("display".into(), |t| t.to_string())),
            (
                "display_tone",
                match self.display_tone {
                    Tone::ImageMean => "mean".into(),
                    Tone::Fixed(t) => t.to_string(),
                },
            ),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// The HARVIM settings with the master seed applied.
    pub fn harvim_config(&self) -> HarvimConfig {
        HarvimConfig {
            seed: self.seed,
            ..self.harvim.clone()
        }
    }

    pub fn remover_kinds(&self) -> Result<Vec<RemoverKind>> {
        self.removers
            .iter()
            .map(|name| {
                Ok(match name.parse::<RemoverKind>()? {
                    RemoverKind::FlowR(_) => RemoverKind::FlowR(self.flow_r.clone()),
                    RemoverKind::HeatDiffusionInpaint { .. } => RemoverKind::HeatDiffusionInpaint {
                        iterations: self.heat_iterations,
                    },
                    RemoverKind::BlindThresholdInpaint { .. } => RemoverKind::BlindThresholdInpaint {
                        band: self.blind_band,
                        min_component: self.blind_min_component,
                        iterations: self.blind_iterations,
                        tone: self.blind_tone,
                    },
                })
            })
            .collect()
    }

    pub fn gauntlet_config(&self) -> Result<crate::eval::GauntletConfig> {
        Ok(crate::eval::GauntletConfig {
            harvim: self.harvim_config(),
            removers: self.remover_kinds()?,
            seed: self.seed,
            tone: match self.display_tone {
                Tone::ImageMean => None,
                Tone::Fixed(t) => Some(t),
            },
        })
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

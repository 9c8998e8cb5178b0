//! The `harvim` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{bundled_toy_corpus, train_prior, train_toy_prior, TOY_SIDE};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::eval::gauntlet::{run_gauntlet, MetricsReport, RemoverKind};
use crate::eval::{psnr, v_metric, Metric};
use crate::flow::FlowModel;
use crate::harvim;
use crate::io::{
    load_flow, load_params_text, load_png, load_png_dir, save_flow, save_params_text, save_png, write_atomic,
    RunConfig, Tone,
};
use crate::rng::SeededRng;
use crate::solver::flow_r_remove;
use crate::tensor::Tensor;
use crate::watermark::{compose_display, draw_noise, soft_mask, GlyphSource, WatermarkGenerator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "harvim", version, about = "Learn visible watermarks that resist inpainting-based removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prior checkpoint (written by train-prior, read by the others).
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the flow prior and write an HVMF checkpoint.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        /// Directory of square PNGs to train on instead of procedural images.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Learn a watermark for one image.
    LearnWm {
        #[command(flatten)]
        common: Common,
        /// Image to protect; defaults to the first bundled toy image.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Watermark an image with saved parameters and run every remover on it.
    Remove {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Parameter file written by learn-wm.
        #[arg(long)]
        params: PathBuf,
    },
    /// Run the paired random-versus-learned removal gauntlet.
    Gauntlet {
        #[command(flatten)]
        common: Common,
        /// PNG directory; defaults to the bundled toy corpus.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Use only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Re-aggregate a gauntlet CSV into the comparison table.
    Report {
        csv: PathBuf,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() || matches!(e, Error::Checkpoint(_)) {
        EXIT_IO
    } else if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.prior {
        cfg.prior = p.clone();
    }
    if let Some(p) = &common.out {
        cfg.out = p.clone();
    }
    cfg.apply_overrides(common.set.iter().map(String::as_str))?;
    Ok(cfg)
}

fn load_prior(cfg: &RunConfig) -> Result<FlowModel<f32>> {
    load_flow(&cfg.prior).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", cfg.prior.display())),
        other => other,
    })
}

fn flat_side(img: &Tensor<f32>, what: &Path) -> Result<usize> {
    match img.shape() {
        [h, w] if h == w => Ok(*h),
        s => Err(Error::invalid(format!("{}: expected a square image, got {s:?}", what.display()))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn train_prior_cmd(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = resolve(common)?;
    let (model, report) = match data {
        Some(dir) => {
            let images = load_png_dir(dir)?;
            let first = images
                .first()
                .ok_or_else(|| Error::invalid(format!("{}: no PNG files", dir.display())))?;
            let side = flat_side(&first.1, dir)?;
            let corpus = images
                .iter()
                .map(|(_, t)| t.reshape([side * side]))
                .collect::<Result<Vec<_>>>()?;
            train_prior(&corpus, side, &cfg.train, cfg.seed)?
        }
        None => train_toy_prior(&cfg.train, cfg.train_images, cfg.seed)?,
    };
    save_flow(&cfg.prior, &model)?;
    let mut curve = String::from("epoch,train_nll,validation_nll\n");
    for (e, v) in report.validation_nll.iter().enumerate() {
        let t = if e == 0 { String::new() } else { report.train_nll[e - 1].to_string() };
        curve.push_str(&format!("{e},{t},{v}\n"));
    }
    write_text(&cfg.out.join("train_curve.csv"), &curve)?;
    println!(
        "wrote {} (validation NLL {:.2} -> {:.2})",
        cfg.prior.display(),
        report.validation_nll[0],
        report.validation_nll.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn tone_for(cfg: &RunConfig, img: &Tensor<f32>) -> f64 {
    match cfg.display_tone {
        Tone::ImageMean => img.mean() as f64,
        Tone::Fixed(t) => t,
    }
}

fn learn_wm_cmd(common: &Common, image: Option<&Path>) -> Result<()> {
    let cfg = resolve(common)?;
    let prior = load_prior(&cfg)?;
    let img = match image {
        Some(p) => load_png(p)?,
        None => bundled_toy_corpus::<f32>()?.remove(0).1,
    };
    let side = flat_side(&img, image.unwrap_or(Path::new("toy00")))?;
    if prior.dim() != side * side {
        return Err(Error::Config(format!(
            "prior models {} pixels but the image has {}",
            prior.dim(),
            side * side
        )));
    }
    let generator = WatermarkGenerator::<f32>::new(side)?;
    let hcfg = cfg.harvim_config();
    let glyph = GlyphSource::Atlas(hcfg.glyph);
    let outcome = harvim::run(&img.reshape([side * side])?, &hcfg, &prior, &generator, &glyph)?;
    let m = outcome.watermark.reshape([side, side])?;
    let mask = soft_mask(&m, hcfg.alpha, hcfg.beta)?;
    let display = compose_display(&img, &mask, tone_for(&cfg, &img))?;
    save_png(&cfg.out.join("watermarked.png"), &display)?;
    save_png(&cfg.out.join("mask.png"), &mask.coverage)?;
    save_params_text(&cfg.out.join("params.txt"), &outcome.params)?;
    write_atomic(
        &cfg.out.join("audit.csv"),
        &csv_bytes(|b| harvim::write_audit_csv(outcome.audit(), b))?,
    )?;
    let p = &outcome.params;
    println!(
        "learned p_left={:.3} p_bottom={:.3} scale={:.3}; wrote {}",
        p.p_left(),
        p.p_bottom(),
        generator.renderer().clamp_log_scale(p.log_scale).exp(),
        cfg.out.display()
    );
    Ok(())
}

fn remove_cmd(common: &Common, image: &Path, params: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let img = load_png(image)?;
    let side = flat_side(&img, image)?;
    let p = load_params_text(params)?;
    let generator = WatermarkGenerator::<f32>::new(side)?;
    let m = generator.render(&p)?.reshape([side, side])?;
    let mask = soft_mask(&m, cfg.harvim.alpha, cfg.harvim.beta)?;
    let mut rng = SeededRng::new(cfg.seed);
    let noise = draw_noise(img.shape(), cfg.harvim.sigma, &mut rng)?;
    let y = mask.observed()?.mul(&img)?.add(&noise)?;
    let tone = tone_for(&cfg, &img);
    let display = compose_display(&img, &mask, tone)?.add(&noise)?;
    save_png(&cfg.out.join("observation.png"), &y)?;
    let kinds = cfg.remover_kinds()?;
    let needs_prior = kinds.iter().any(|k| matches!(k, RemoverKind::FlowR(_)));
    let prior = if needs_prior { Some(load_prior(&cfg)?) } else { None };
    for kind in &kinds {
        let (recon, input) = match kind {
            RemoverKind::FlowR(schedule) => {
                let prior = prior.as_ref().expect("loaded above");
                let flat = flow_r_remove(
                    &y.reshape([side * side])?,
                    &mask.coverage.reshape([side * side])?,
                    cfg.harvim.sigma,
                    prior,
                    schedule,
                    &mut rng.derive(1),
                )?;
                (flat.reshape([side, side])?, &y)
            }
            RemoverKind::HeatDiffusionInpaint { iterations } => {
                let masked: Vec<bool> = mask.coverage.data().iter().map(|w| *w >= 0.5).collect();
                (crate::eval::heat_diffusion_inpaint(&y, &masked, *iterations)?, &y)
            }
            RemoverKind::BlindThresholdInpaint {
                band,
                min_component,
                iterations,
                tone: assumed,
            } => {
                let det = crate::eval::BlindThreshold {
                    tone: assumed.unwrap_or(tone),
                    band: *band,
                    min_component: *min_component,
                    iterations: *iterations,
                };
                (det.remove(&display)?, &display)
            }
        };
        save_png(&cfg.out.join(format!("recon_{}.png", kind.name())), &recon)?;
        println!(
            "{:<16} psnr {:6.2} dB  v_psnr {:+6.2} dB",
            kind.name(),
            psnr(&recon, &img)?,
            v_metric(&recon, input, &img, Metric::Psnr)?
        );
    }
    Ok(())
}

fn gauntlet_cmd(common: &Common, images: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(dir) = images {
        cfg.images = Some(dir.to_path_buf());
    }
    let prior = load_prior(&cfg)?;
    let mut set = match &cfg.images {
        Some(dir) => load_png_dir(dir)?,
        None => bundled_toy_corpus()?,
    };
    if let Some(n) = limit {
        set.truncate(n);
    }
    let side = match set.first() {
        Some((_, img)) => flat_side(img, cfg.images.as_deref().unwrap_or(Path::new("bundled")))?,
        None => TOY_SIDE,
    };
    let generator = WatermarkGenerator::<f32>::new(side)?;
    let (report, _) = run_gauntlet(&set, &prior, &generator, &cfg.gauntlet_config()?)?;
    write_atomic(&cfg.out.join("report.csv"), &csv_bytes(|b| report.write_csv(b))?)?;
    let table = report.table();
    write_text(&cfg.out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn report_cmd(csv: &Path, out: Option<&Path>) -> Result<()> {
    let file = std::fs::File::open(csv).map_err(|e| Error::io(csv, e))?;
    let report = MetricsReport::from_csv(file)?;
    let table = report.table();
    if let Some(p) = out {
        write_text(p, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(cases: usize, seed: u64) -> Result<bool> {
    let outcomes = diagnostics::run_all(cases, seed)?;
    for o in &outcomes {
        println!("{o}");
    }
    Ok(outcomes.iter().all(|o| o.passed()))
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::TrainPrior { common, data } => train_prior_cmd(common, data.as_deref())?,
        Command::LearnWm { common, image } => learn_wm_cmd(common, image.as_deref())?,
        Command::Remove { common, image, params } => remove_cmd(common, image, params)?,
        Command::Gauntlet { common, images, limit } => gauntlet_cmd(common, images.as_deref(), *limit)?,
        Command::Report { csv, out } => report_cmd(csv, out.as_deref())?,
        Command::Gradcheck { cases, seed } => {
            if !gradcheck_cmd(*cases, *seed)? {
                eprintln!("error: gradient check failed");
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

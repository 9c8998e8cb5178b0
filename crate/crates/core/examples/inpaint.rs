//! Recovers a watermarked toy image with the flow prior and with heat diffusion.
//!
//! `cargo run --release --example inpaint -- [prior.hvmf] [out-dir]`
//!
//! Without a checkpoint a prior is trained first (about 20 s).

use std::path::{Path, PathBuf};

use harvim::data::{bundled_toy_corpus, toy_prior_config, train_toy_prior};
use harvim::eval::{heat_diffusion_inpaint, psnr, v_metric, Metric, RemoverKind};
use harvim::flow::FlowModel;
use harvim::io::{load_flow, save_png};
use harvim::solver::{continuation_solve, InverseProblem};
use harvim::watermark::{draw_noise, soft_mask, GlyphSource, WatermarkGenerator, WatermarkParams};
use harvim::SeededRng;

fn prior(path: Option<&Path>) -> harvim::Result<FlowModel<f32>> {
    match path {
        Some(p) => load_flow(p),
        None => Ok(train_toy_prior(&toy_prior_config(), 2000, 0)?.0),
    }
}

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next().map(PathBuf::from);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "inpaint-out".into()));
    let prior = prior(checkpoint.as_deref())?;

    let (_, truth) = bundled_toy_corpus::<f32>()?.swap_remove(3);
    let generator = WatermarkGenerator::<f32>::new(32)?;
    let params = WatermarkParams::new(GlyphSource::Atlas('8'), 0.5, 0.5, 0.0);
    let mask = soft_mask(&generator.render(&params)?.reshape([32, 32])?, 0.15, 0.01)?;
    let mut rng = SeededRng::new(0);
    let y = mask.observed()?.mul(&truth)?.add(&draw_noise(truth.shape(), 0.05, &mut rng)?)?;

    let problem = InverseProblem::new(y.reshape([1024])?, &mask.coverage.reshape([1024])?, 0.05, &prior)?;
    let init = y.reshape([1024])?.add(&rng.normal_tensor([1024], 0.1))?;
    let trajectory = continuation_solve(&problem, &RemoverKind::flow_r_schedule(), &init)?;
    let flow_r = trajectory.last().x.reshape([32, 32])?;

    let holes: Vec<bool> = mask.coverage.data().iter().map(|w| *w >= 0.5).collect();
    let heat = heat_diffusion_inpaint(&y, &holes, 500)?;

    println!("observation     psnr {:6.2} dB", psnr(&y, &truth)?);
    for (name, recon) in [("flow prior", &flow_r), ("heat diffusion", &heat)] {
        println!(
            "{name:<15} psnr {:6.2} dB  gain {:+6.2} dB",
            psnr(recon, &truth)?,
            v_metric(recon, &y, &truth, Metric::Psnr)?
        );
    }
    for s in trajectory.states.iter().step_by(25) {
        println!("  round {:>3}  lambda {:.2}  objective {:.1}", s.round, s.lambda, s.objective);
    }

    for (name, img) in [("truth", &truth), ("observation", &y), ("flow_r", &flow_r), ("heat", &heat)] {
        save_png(&out.join(format!("{name}.png")), img)?;
    }
    println!("images in {}", out.display());
    Ok(())
}

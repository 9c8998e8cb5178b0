//! Random versus learned placements under every remover, on the bundled corpus.
//!
//! `cargo run --release --example gauntlet -- [prior.hvmf] [images] [rounds]`
//!
//! The full run (20 images, 100 rounds) takes a few minutes on one core.

use std::path::PathBuf;

use harvim::data::{bundled_toy_corpus, toy_prior_config, train_toy_prior};
use harvim::eval::gauntlet::{run_gauntlet, Column, OBSERVATION};
use harvim::io::{load_flow, RunConfig};
use harvim::watermark::WatermarkGenerator;

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1);
    let prior = match args.next().map(PathBuf::from) {
        Some(p) => load_flow(&p)?,
        None => train_toy_prior(&toy_prior_config(), 2000, 0)?.0,
    };
    let mut images = bundled_toy_corpus::<f32>()?;
    images.truncate(args.next().map_or(20, |s| s.parse().expect("image count")));
    let mut cfg = RunConfig::default();
    if let Some(r) = args.next() {
        cfg.harvim.rounds = r.parse().expect("rounds");
    }

    let generator = WatermarkGenerator::<f32>::new(32)?;
    let (report, cases) = run_gauntlet(&images, &prior, &generator, &cfg.gauntlet_config()?)?;
    print!("{}", report.table());
    for remover in report.removers().into_iter().filter(|r| r != OBSERVATION) {
        if let Some(imp) = report.improvement(&remover, Column::VPsnr) {
            println!(
                "{remover:<16} learned placement harder on {}/{} images, sign test p = {:.4}",
                imp.wins,
                imp.wins + imp.losses + imp.ties,
                imp.p_value
            );
        }
    }
    let c = &cases[0];
    println!(
        "{}: random at ({:.2}, {:.2}), learned at ({:.2}, {:.2})",
        c.id,
        c.random.params.p_left(),
        c.random.params.p_bottom(),
        c.harvim.params.p_left(),
        c.harvim.params.p_bottom()
    );
    Ok(())
}

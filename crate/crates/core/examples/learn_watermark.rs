//! Learns a removal-resistant placement and size for one image.
//!
//! `cargo run --release --example learn_watermark -- [prior.hvmf] [image-index] [rounds]`
//!
//! Without a checkpoint a prior is trained first (about 20 s).

use std::path::PathBuf;

use harvim::data::{bundled_toy_corpus, toy_prior_config, train_toy_prior};
use harvim::harvim::{random_placement, run, HarvimConfig};
use harvim::io::load_flow;
use harvim::watermark::{GlyphSource, WatermarkGenerator};
use harvim::SeededRng;

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1);
    let prior = match args.next().map(PathBuf::from) {
        Some(p) => load_flow(&p)?,
        None => train_toy_prior(&toy_prior_config(), 2000, 0)?.0,
    };
    let index: usize = args.next().map_or(0, |s| s.parse().expect("image index"));
    let config = HarvimConfig {
        rounds: args.next().map_or(100, |s| s.parse().expect("rounds")),
        ..Default::default()
    };

    let (id, image) = bundled_toy_corpus::<f32>()?.swap_remove(index);
    let generator = WatermarkGenerator::<f32>::new(32)?;
    let outcome = run(&image.reshape([1024])?, &config, &prior, &generator, &GlyphSource::Atlas(config.glyph))?;

    println!("{id}: grid start p_left {:.2}, p_bottom {:.2}", outcome.initial.p_left(), outcome.initial.p_bottom());
    println!("round  lambda  similarity  regularizer  |grad|");
    for row in outcome.audit().iter().step_by((config.rounds / 10).max(1)) {
        println!(
            "{:>5}  {:>6.2}  {:>10.2}  {:>11.2}  {:.2e}",
            row.round, row.lambda, row.similarity, row.regularizer, row.grad_norm
        );
    }
    let p = &outcome.params;
    println!(
        "learned p_left {:.3}, p_bottom {:.3}, scale {:.3}",
        p.p_left(),
        p.p_bottom(),
        generator.renderer().clamp_log_scale(p.log_scale).exp()
    );
    let random = random_placement(GlyphSource::Atlas(config.glyph), p.log_scale, &mut SeededRng::new(1));
    println!("a random placement for comparison: p_left {:.3}, p_bottom {:.3}", random.p_left(), random.p_bottom());
    Ok(())
}

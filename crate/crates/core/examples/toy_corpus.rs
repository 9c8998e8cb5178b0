//! Renders the procedural toy corpus to PNG files.
//!
//! `cargo run --example toy_corpus -- <out-dir> [count] [seed]`

use std::path::PathBuf;

use harvim::data::{toy_corpus, ToyStyle, BUNDLED_SEED};
use harvim::io::save_png;
use harvim::Tensor;

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let count = args.next().map_or(20, |s| s.parse().expect("count"));
    let seed = args.next().map_or(BUNDLED_SEED, |s| s.parse().expect("seed"));
    std::fs::create_dir_all(&out).map_err(|e| harvim::Error::Io { path: out.clone(), source: e })?;
    let images: Vec<Tensor<f32>> = toy_corpus(&ToyStyle::default(), count, seed)?;
    for (i, img) in images.iter().enumerate() {
        save_png(&out.join(format!("toy{i:02}.png")), img)?;
    }
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

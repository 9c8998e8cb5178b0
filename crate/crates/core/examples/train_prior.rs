//! Trains the 6-coupling image prior on procedural 32×32 images and saves it.
//!
//! `cargo run --release --example train_prior -- [checkpoint] [images] [epochs]`

use std::path::PathBuf;

use harvim::data::{toy_prior_config, train_toy_prior};
use harvim::io::{load_flow, save_flow};
use harvim::SeededRng;

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "prior.hvmf".into()));
    let images = args.next().map_or(2000, |s| s.parse().expect("image count"));
    let mut cfg = toy_prior_config();
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().expect("epochs");
    }

    let (model, report) = train_toy_prior(&cfg, images, 0)?;
    println!("epoch  train NLL  held-out NLL");
    for (e, v) in report.validation_nll.iter().enumerate() {
        let train = if e == 0 { "-".to_string() } else { format!("{:.1}", report.train_nll[e - 1]) };
        println!("{e:>5}  {train:>9}  {v:>12.1}");
    }
    save_flow(&path, &model)?;

    // a checkpoint round-trips bit-exactly
    let back = load_flow(&path)?;
    assert_eq!(back.params(), model.params());
    let sample = back.sample(&mut SeededRng::new(1), 1)?.remove(0);
    println!(
        "wrote {} ({} parameters); a sample has mean {:.3}",
        path.display(),
        model.params().num_scalars(),
        sample.mean()
    );
    Ok(())
}

//! Loads a run configuration, applies overrides and prints the resolved file.
//!
//! `cargo run --example config_file -- [config] [key=value ...]`

use std::path::Path;

use harvim::io::RunConfig;

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1).peekable();
    let mut cfg = match args.peek() {
        Some(a) if !a.contains('=') => RunConfig::load(Path::new(&args.next().unwrap()))?,
        _ => RunConfig::parse("# defaults\nseed = 0\nharvim.rounds = 100\n")?,
    };
    let overrides: Vec<String> = args.collect();
    cfg.apply_overrides(overrides.iter().map(String::as_str))?;
    cfg.validate()?;
    print!("{}", cfg.serialize());
    let removers: Vec<&str> = cfg.remover_kinds()?.iter().map(|k| k.name()).collect();
    println!("# removers: {}", removers.join(", "));
    Ok(())
}

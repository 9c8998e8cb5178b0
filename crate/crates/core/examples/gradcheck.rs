//! Runs every finite-difference gradient suite in 64-bit precision.
//!
//! `cargo run --release --example gradcheck -- [cases] [seed]`

use harvim::diagnostics::run_all;

fn main() -> harvim::Result<()> {
    let mut args = std::env::args().skip(1);
    let cases = args.next().map_or(100, |s| s.parse().expect("cases"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let outcomes = run_all(cases, seed)?;
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} suites, {failed} failed", outcomes.len());
    if failed > 0 {
        std::process::exit(2);
    }
    Ok(())
}

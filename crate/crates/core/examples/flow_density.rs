//! Fits a small RealNVP-style flow to the two-moons density and samples it.
//!
//! `cargo run --release --example flow_density`

use harvim::flow::{train_mle, FlowConfig, FlowModel, PriorTrainConfig};
use harvim::{SeededRng, Tensor};

fn two_moons(rng: &mut SeededRng, count: usize) -> Vec<Tensor<f64>> {
    (0..count)
        .map(|i| {
            let t = std::f64::consts::PI * rng.uniform();
            let (x, y) = if i % 2 == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            Tensor::from_vec(vec![x + 0.05 * rng.normal(), y + 0.05 * rng.normal()]).unwrap()
        })
        .collect()
}

fn main() -> harvim::Result<()> {
    let mut rng = SeededRng::new(3);
    let data = two_moons(&mut rng, 1024);
    let mut model: FlowModel<f64> = FlowModel::new(&FlowConfig::toy(2, 6, 32), &mut rng)?;
    let cfg = PriorTrainConfig {
        epochs: 20,
        batch_size: 64,
        learning_rate: 5e-3,
        validation_fraction: 0.1,
        dequantization: 0.0,
    };
    let report = train_mle(&mut model, &data, &cfg, &mut rng)?;
    for (epoch, nll) in report.validation_nll.iter().enumerate().step_by(5) {
        println!("epoch {epoch:>3}: held-out NLL {nll:.3}");
    }

    // density on a coarse grid, drawn as ASCII
    let shades = [' ', '.', ':', '+', '#'];
    for row in 0..12 {
        let y = 1.2 - row as f64 * 0.18;
        let line: String = (0..40)
            .map(|col| {
                let x = -1.2 + col as f64 * 0.11;
                let p = model.log_prob(&Tensor::from_vec(vec![x, y]).unwrap()).unwrap().exp();
                shades[((p * 4.0) as usize).min(4)]
            })
            .collect();
        println!("|{line}|");
    }

    for s in model.sample(&mut rng, 5)? {
        println!("sample ({:+.3}, {:+.3})", s.data()[0], s.data()[1]);
    }
    Ok(())
}

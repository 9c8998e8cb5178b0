use crate::autodiff::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::AdamW;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

use super::FlowModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the corpus held out for the validation curve, in `[0, 1)`.
    pub validation_fraction: f64,
    /// Amplitude of the uniform dequantization noise added to training batches.
    pub dequantization: f64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            dequantization: 1.0 / 256.0,
        }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(self.dequantization >= 0.0) {
            return Err(Error::Config("dequantization amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss curves of one training session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training NLL per epoch (with dequantization noise).
    pub train_nll: Vec<f64>,
    /// Mean held-out NLL; entry 0 is measured before the first update.
    pub validation_nll: Vec<f64>,
}

fn mean_nll<S: Real>(model: &FlowModel<S>, corpus: &[Tensor<S>], idx: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let rows: Vec<Tensor<S>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
        let lp = model.log_prob_batch(&Tensor::stack_rows(&rows)?)?;
        total -= lp.data().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok(total / idx.len() as f64)
}

/// Maximum-likelihood training with AdamW on dequantized minibatches.
///
/// Seeded-deterministic: the split, batch order and noise all come from `rng`.
pub fn train_mle<S: Real>(
    model: &mut FlowModel<S>,
    corpus: &[Tensor<S>],
    config: &PriorTrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if let Some(bad) = corpus.iter().find(|x| x.len() != model.dim()) {
        return Err(Error::ShapeMismatch {
            op: "train_mle",
            lhs: bad.shape().to_vec(),
            rhs: vec![model.dim()],
        });
    }
    let corpus: Vec<Tensor<S>> = corpus
        .iter()
        .map(|x| x.reshape([model.dim()]))
        .collect::<Result<_>>()?;

    let order = rng.permutation(corpus.len());
    let held = ((corpus.len() as f64) * config.validation_fraction).floor() as usize;
    let held = held.min(corpus.len() - 1);
    let (val_idx, train_idx) = order.split_at(held);
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let mut report = TrainReport::default();
    report
        .validation_nll
        .push(mean_nll(model, &corpus, val_idx, config.batch_size)?);
    let mut opt = AdamW::new(config.learning_rate).with_weight_decay(0.0);

    for _epoch in 0..config.epochs {
        let perm = rng.permutation(train_idx.len());
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in perm.chunks(config.batch_size) {
            let rows: Vec<Tensor<S>> = chunk.iter().map(|&k| corpus[train_idx[k]].clone()).collect();
            let clean = Tensor::stack_rows(&rows)?;
            let noise = rng.uniform_tensor::<S>(clean.shape().to_vec(), 0.0, config.dequantization);
            let batch = clean.add(&noise)?;

            let tape = Tape::new();
            let params = model.params().bind(Some(&tape));
            let lp = model.log_prob_with(&params, &Var::constant(batch))?;
            let loss = lp.mean()?.neg()?;
            let grads = params.gradients(&backward(&loss)?);
            opt.step(model.params_mut().tensors_mut(), &grads)?;

            epoch_loss += loss.item()?.as_f64() * chunk.len() as f64;
            seen += chunk.len();
        }
        report.train_nll.push(epoch_loss / seen as f64);
        report
            .validation_nll
            .push(mean_nll(model, &corpus, val_idx, config.batch_size)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

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

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let mut rng = SeededRng::new(0);
        let mut model: FlowModel<f64> = FlowModel::new(&FlowConfig::toy(2, 2, 8), &mut rng).unwrap();
        let before = model.clone();
        let data = two_moons(&mut rng, 20);
        let cfg = PriorTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let report = train_mle(&mut model, &data, &cfg, &mut rng).unwrap();
        assert_eq!(model, before);
        assert_eq!(report.validation_nll.len(), 1);
    }

    #[test]
    fn rejects_empty_corpus_and_bad_dimensions() {
        let mut rng = SeededRng::new(0);
        let mut model: FlowModel<f64> = FlowModel::new(&FlowConfig::toy(2, 2, 8), &mut rng).unwrap();
        let cfg = PriorTrainConfig::default();
        assert!(train_mle(&mut model, &[], &cfg, &mut rng).is_err());
        let bad = vec![Tensor::zeros([3])];
        assert!(train_mle(&mut model, &bad, &cfg, &mut rng).is_err());
        let cfg = PriorTrainConfig {
            validation_fraction: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identical_images_nll_decreases_monotonically() {
        let mut rng = SeededRng::new(1);
        let mut model: FlowModel<f64> = FlowModel::new(&FlowConfig::toy(8, 4, 16), &mut rng).unwrap();
        let img = Tensor::from_vec(vec![0.1, 0.5, 0.9, 0.3, 0.7, 0.2, 0.4, 0.6]).unwrap();
        let data = vec![img; 32];
        let cfg = PriorTrainConfig {
            epochs: 5,
            batch_size: 8,
            learning_rate: 1e-2,
            validation_fraction: 0.25,
            ..Default::default()
        };
        let report = train_mle(&mut model, &data, &cfg, &mut rng).unwrap();
        for w in report.validation_nll.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.validation_nll);
        }
    }

    #[test]
    fn two_moons_samples_stay_in_expanded_box() {
        let mut rng = SeededRng::new(3);
        let data = two_moons(&mut rng, 512);
        let mut model: FlowModel<f64> = FlowModel::new(&FlowConfig::toy(2, 6, 32), &mut rng).unwrap();
        let cfg = PriorTrainConfig {
            epochs: 40,
            batch_size: 64,
            learning_rate: 5e-3,
            validation_fraction: 0.1,
            dequantization: 0.0,
        };
        let report = train_mle(&mut model, &data, &cfg, &mut rng).unwrap();
        assert!(report.validation_nll.last().unwrap() <= &report.validation_nll[0]);

        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        let mut mean = [0.0; 2];
        for x in &data {
            for k in 0..2 {
                lo[k] = lo[k].min(x.data()[k]);
                hi[k] = hi[k].max(x.data()[k]);
                mean[k] += x.data()[k] / data.len() as f64;
            }
        }
        let mut std = [0.0; 2];
        for x in &data {
            for k in 0..2 {
                std[k] += (x.data()[k] - mean[k]).powi(2) / data.len() as f64;
            }
        }
        let std = std.map(f64::sqrt);
        let samples = model.sample(&mut rng, 1000).unwrap();
        let inside = samples
            .iter()
            .filter(|s| (0..2).all(|k| s.data()[k] >= lo[k] - 3.0 * std[k] && s.data()[k] <= hi[k] + 3.0 * std[k]))
            .count();
        assert!(inside >= 950, "{inside}/1000 inside");
        assert!(samples.iter().all(|s| s.data().iter().all(|v| v.is_finite())));
    }
}

//! Named parameter storage, fully-connected layers and the AdamW optimizer.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Insertion-ordered named tensors; the unit of checkpointing and optimization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.tensors[i] = value,
            None => {
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Wraps every parameter as a tape leaf, or as a constant when `tape` is `None`.
    pub fn bind(&self, tape: Option<&Tape<S>>) -> BoundParams<S> {
        let vars = self
            .tensors
            .iter()
            .map(|t| match tape {
                Some(tape) => tape.leaf(t.clone()),
                None => Var::constant(t.clone()),
            })
            .collect();
        BoundParams {
            index: self
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
            vars,
        }
    }
}

/// Parameters of a [`ParamStore`] lifted into [`Var`]s for one forward pass.
pub struct BoundParams<S: Real> {
    index: HashMap<String, usize>,
    vars: Vec<Var<S>>,
}

impl<S: Real> BoundParams<S> {
    pub fn var(&self, name: &str) -> Result<&Var<S>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unbound parameter {name:?}")))
    }

    /// Gradients in store order; parameters the root did not reach get zeros.
    pub fn gradients(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
            })
            .collect()
    }
}

/// Registers an MLP `prefix.w{i}` / `prefix.b{i}` with the given layer widths.
///
/// Hidden layers get scaled normal weights; the last layer is scaled by
/// `last_std` (zero gives an MLP whose output is identically zero).
pub fn init_mlp<S: Real>(
    store: &mut ParamStore<S>,
    prefix: &str,
    widths: &[usize],
    last_std: f64,
    rng: &mut SeededRng,
) {
    let layers = widths.len() - 1;
    for i in 0..layers {
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        let std = if i + 1 == layers {
            last_std
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let w = if std == 0.0 {
            Tensor::zeros([fan_in, fan_out])
        } else {
            rng.normal_tensor([fan_in, fan_out], std)
        };
        store.insert(format!("{prefix}.w{i}"), w);
        store.insert(format!("{prefix}.b{i}"), Tensor::zeros([fan_out]));
    }
}

/// Number of layers registered under `prefix` by [`init_mlp`].
pub fn mlp_depth<S: Real>(store: &ParamStore<S>, prefix: &str) -> usize {
    (0..)
        .take_while(|i| store.get(&format!("{prefix}.w{i}")).is_some())
        .count()
}

/// Forward pass of an MLP over a `[batch, in]` input with tanh hidden activations.
pub fn mlp_forward<S: Real>(params: &BoundParams<S>, prefix: &str, depth: usize, x: &Var<S>) -> Result<Var<S>> {
    let mut h = x.clone();
    for i in 0..depth {
        let w = params.var(&format!("{prefix}.w{i}"))?;
        let b = params.var(&format!("{prefix}.b{i}"))?;
        h = h.matmul(w)?.add(b)?;
        if i + 1 < depth {
            h = h.tanh()?;
        }
    }
    Ok(h)
}

/// Adam with decoupled weight decay. Defaults follow the common reference
/// implementation: betas (0.9, 0.999), eps 1e-8, weight decay 0.01.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Moments are kept in `f64` regardless of
    /// parameter precision.
    pub fn step<S: Real>(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("AdamW: parameter/gradient count mismatch"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "AdamW::step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let mut out = Vec::with_capacity(p.len());
            for (i, (&pi, &gi)) in p.data().iter().zip(g.data()).enumerate() {
                let (pi, gi) = (pi.as_f64(), gi.as_f64());
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                let decayed = pi * (1.0 - self.lr * self.weight_decay);
                out.push(S::lit(decayed - self.lr * mhat / (vhat.sqrt() + self.eps)));
            }
            *p = Tensor::new(p.shape().to_vec(), out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // bias-corrected first step is lr * g/|g| (+ decay)
        let mut opt = AdamW::new(0.1).with_weight_decay(0.0);
        let mut p = vec![Tensor::<f64>::from_vec(vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::<f64>::from_vec(vec![3.0, -0.5]).unwrap()];
        opt.step(&mut p, &g).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut opt = AdamW::new(0.05);
        let mut p = vec![Tensor::<f64>::from_vec(vec![2.0, -3.0]).unwrap()];
        for _ in 0..500 {
            let tape = Tape::new();
            let x = tape.leaf(p[0].clone());
            let loss = x.add_scalar(-0.5).unwrap().square().unwrap().sum().unwrap();
            let g = backward(&loss).unwrap();
            let grads = vec![g.get(&x).unwrap().clone()];
            opt.step(&mut p, &grads).unwrap();
        }
        for v in p[0].data() {
            assert!((v - 0.5).abs() < 0.05, "{v}");
        }
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        init_mlp(&mut store, "net", &[3, 5, 5, 3], 0.0, &mut rng);
        assert_eq!(mlp_depth(&store, "net"), 3);
        let bound = store.bind(None);
        let x = Var::constant(rng.normal_tensor([2, 3], 1.0));
        let y = mlp_forward(&bound, "net", 3, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }
}

//! RealNVP-style normalizing flow used as the generative image prior.
//!
//! Each affine coupling layer keeps the coordinates selected by its binary
//! partition mask fixed and transforms the rest:
//!
//! ```text
//! s = bound · tanh(S(x ⊙ b)) ⊙ (1 − b)
//! t = T(x ⊙ b) ⊙ (1 − b)
//! z = x ⊙ exp(s) + t,   log|det J| = Σ s
//! ```
//!
//! with `S`, `T` two-hidden-layer tanh MLPs. Layers alternate between a
//! partition and its complement. The base distribution is a standard normal.

mod train;

use std::f64::consts::PI;

use crate::autodiff::{grad, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_mlp, mlp_depth, mlp_forward, BoundParams, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

pub use train::{train_mle, PriorTrainConfig, TrainReport};

/// How coordinates are split between the fixed and transformed halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Checkerboard over a `side × side` image.
    Checkerboard { side: usize },
    /// Even vs. odd flattened index.
    Alternating,
    /// First half vs. second half of the flattened vector.
    HalfSplit,
}

impl Partition {
    /// Mask with ones on the coordinates that condition (stay fixed) in even layers.
    pub fn mask(&self, dim: usize) -> Result<Vec<f64>> {
        let mask: Vec<f64> = match *self {
            Partition::Checkerboard { side } => {
                if side * side != dim {
                    return Err(Error::invalid(format!(
                        "checkerboard side {side} does not match dimension {dim}"
                    )));
                }
                (0..dim)
                    .map(|i| ((i / side + i % side) % 2 == 0) as u8 as f64)
                    .collect()
            }
            Partition::Alternating => (0..dim).map(|i| (i % 2 == 0) as u8 as f64).collect(),
            Partition::HalfSplit => (0..dim).map(|i| (i < dim / 2) as u8 as f64).collect(),
        };
        let ones = mask.iter().filter(|&&m| m > 0.5).count();
        if ones == 0 || ones == dim {
            return Err(Error::invalid(format!(
                "partition must split {dim} coordinates into two non-empty sets"
            )));
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Bound on the per-coordinate log-scale of each coupling.
    pub scale_clamp: f64,
    pub partition: Partition,
}

impl FlowConfig {
    /// Six couplings, width 128, checkerboard masks over a square image.
    pub fn for_image(side: usize) -> Self {
        Self {
            dim: side * side,
            layers: 6,
            hidden: 128,
            scale_clamp: 2.0,
            partition: Partition::Checkerboard { side },
        }
    }

    /// Small flow over a flat vector, for toy densities and tests.
    pub fn toy(dim: usize, layers: usize, hidden: usize) -> Self {
        Self {
            dim,
            layers,
            hidden,
            scale_clamp: 2.0,
            partition: Partition::Alternating,
        }
    }
}

/// One affine coupling: the partition mask and the names of its two networks.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer<S: Real = f32> {
    mask: Tensor<S>,
    complement: Tensor<S>,
    scale_clamp: S,
    scale_net: String,
    translate_net: String,
    depth: usize,
}

impl<S: Real> CouplingLayer<S> {
    fn new(index: usize, mask: Tensor<S>, scale_clamp: S, depth: usize) -> Result<Self> {
        let complement = mask.map("complement", |m| S::one() - m)?;
        Ok(Self {
            mask,
            complement,
            scale_clamp,
            scale_net: format!("coupling.{index}.s"),
            translate_net: format!("coupling.{index}.t"),
            depth,
        })
    }

    pub fn mask(&self) -> &Tensor<S> {
        &self.mask
    }

    fn conditioner(&self, params: &BoundParams<S>, fixed: &Var<S>) -> Result<(Var<S>, Var<S>)> {
        let comp = Var::constant(self.complement.clone());
        let s = mlp_forward(params, &self.scale_net, self.depth, fixed)?
            .tanh()?
            .mul_scalar(self.scale_clamp)?
            .mul(&comp)?;
        let t = mlp_forward(params, &self.translate_net, self.depth, fixed)?.mul(&comp)?;
        Ok((s, t))
    }

    /// `x: [batch, n]` to `(z, log|det J|: [batch])`.
    pub fn forward(&self, params: &BoundParams<S>, x: &Var<S>) -> Result<(Var<S>, Var<S>)> {
        let fixed = x.mul(&Var::constant(self.mask.clone()))?;
        let (s, t) = self.conditioner(params, &fixed)?;
        let z = x.mul(&s.exp()?)?.add(&t)?;
        let batch = x.shape()[0];
        let logdet = s.sum_to(&[batch, 1])?.reshape([batch])?;
        Ok((z, logdet))
    }

    pub fn inverse(&self, params: &BoundParams<S>, z: &Var<S>) -> Result<Var<S>> {
        let fixed = z.mul(&Var::constant(self.mask.clone()))?;
        let (s, t) = self.conditioner(params, &fixed)?;
        z.sub(&t)?.mul(&s.neg()?.exp()?)
    }
}

/// A stack of coupling layers over `dim` coordinates with a standard-normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<S: Real = f32> {
    dim: usize,
    layers: Vec<CouplingLayer<S>>,
    params: ParamStore<S>,
}

impl<S: Real> FlowModel<S> {
    /// Random hidden layers with zero-initialized output layers, so the
    /// freshly built flow is the identity map.
    pub fn new(config: &FlowConfig, rng: &mut SeededRng) -> Result<Self> {
        Self::with_output_std(config, rng, 0.0)
    }

    /// Like [`FlowModel::new`] but with random output layers of the given
    /// scale, giving a non-trivial transform from the start.
    pub fn with_output_std(config: &FlowConfig, rng: &mut SeededRng, output_std: f64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.dim < 2 {
            return Err(Error::invalid(format!("invalid flow configuration {config:?}")));
        }
        if !(config.scale_clamp > 0.0) {
            return Err(Error::invalid("scale clamp must be positive"));
        }
        let base = config.partition.mask(config.dim)?;
        let widths = [config.dim, config.hidden, config.hidden, config.dim];
        let mut params = ParamStore::new();
        let mut masks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            init_mlp(&mut params, &format!("coupling.{i}.s"), &widths, output_std, rng);
            init_mlp(&mut params, &format!("coupling.{i}.t"), &widths, output_std, rng);
            let mask: Vec<f64> = if i % 2 == 0 {
                base.clone()
            } else {
                base.iter().map(|m| 1.0 - m).collect()
            };
            masks.push(Tensor::from_f64([config.dim], &mask)?);
        }
        Self::from_parts(params, masks, S::lit(config.scale_clamp))
    }

    /// The identity flow over `dim` coordinates (Gaussian prior).
    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(&FlowConfig::toy(dim, 2, 4), &mut SeededRng::new(0))
    }

    pub(crate) fn from_parts(params: ParamStore<S>, masks: Vec<Tensor<S>>, scale_clamp: S) -> Result<Self> {
        let dim = masks
            .first()
            .map(Tensor::len)
            .ok_or_else(|| Error::invalid("flow needs at least one coupling layer"))?;
        let mut layers = Vec::with_capacity(masks.len());
        for (i, mask) in masks.into_iter().enumerate() {
            if mask.len() != dim {
                return Err(Error::invalid("coupling masks must share one dimension"));
            }
            let ones = mask.data().iter().filter(|m| **m > S::lit(0.5)).count();
            if ones == 0 || ones == dim {
                return Err(Error::invalid(format!("coupling {i} mask does not split coordinates")));
            }
            let depth = mlp_depth(&params, &format!("coupling.{i}.s"));
            if depth == 0 || depth != mlp_depth(&params, &format!("coupling.{i}.t")) {
                return Err(Error::invalid(format!("coupling {i} networks are incomplete")));
            }
            layers.push(CouplingLayer::new(i, mask, scale_clamp, depth)?);
        }
        Ok(Self { dim, layers, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer<S>] {
        &self.layers
    }

    pub fn scale_clamp(&self) -> S {
        self.layers[0].scale_clamp
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Real>(&self) -> FlowModel<T> {
        let masks = self.layers.iter().map(|l| l.mask.cast()).collect();
        FlowModel::from_parts(self.params.cast(), masks, T::lit(self.scale_clamp().as_f64()))
            .expect("cast preserves a valid flow")
    }

    fn as_batch(&self, x: &Var<S>) -> Result<Var<S>> {
        let n = x.shape().last().copied().unwrap_or(0);
        if n != self.dim || x.shape().len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "flow",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        if x.shape().len() == 1 {
            x.reshape([1, self.dim])
        } else {
            Ok(x.clone())
        }
    }

    /// Data to latent: `(z, Σ log|det J|)` for a `[batch, n]` input.
    pub fn forward_with(&self, params: &BoundParams<S>, x: &Var<S>) -> Result<(Var<S>, Var<S>)> {
        let x = self.as_batch(x)?;
        let batch = x.shape()[0];
        let mut z = x;
        let mut total = Var::constant(Tensor::zeros([batch]));
        for layer in &self.layers {
            let (next, logdet) = layer.forward(params, &z)?;
            z = next;
            total = total.add(&logdet)?;
        }
        Ok((z, total))
    }

    /// Per-sample log-density `[batch]` of a `[batch, n]` input under explicitly
    /// bound parameters (used for training).
    pub fn log_prob_with(&self, params: &BoundParams<S>, x: &Var<S>) -> Result<Var<S>> {
        let (z, logdet) = self.forward_with(params, x)?;
        let batch = z.shape()[0];
        let norm = S::lit(-0.5 * self.dim as f64 * (2.0 * PI).ln());
        let base = z
            .square()?
            .sum_to(&[batch, 1])?
            .reshape([batch])?
            .mul_scalar(S::lit(-0.5))?
            .add_scalar(norm)?;
        base.add(&logdet)
    }

    /// Log-density differentiable with respect to `x` (parameters constant).
    /// A 1-D input gives a rank-0 result; a `[batch, n]` input gives `[batch]`.
    pub fn log_prob_var(&self, x: &Var<S>) -> Result<Var<S>> {
        let lp = self.log_prob_with(&self.params.bind(None), x)?;
        if x.shape().len() == 1 {
            lp.reshape(Vec::<usize>::new())
        } else {
            Ok(lp)
        }
    }

    pub fn log_prob(&self, x: &Tensor<S>) -> Result<S> {
        self.log_prob_var(&Var::constant(x.clone()))?.item()
    }

    pub fn log_prob_batch(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.log_prob_var(&Var::constant(x.clone()))?.into_value())
    }

    /// `(log p(x), ∇ₓ log p(x))` in one forward/backward pass.
    pub fn value_and_grad(&self, x: &Tensor<S>) -> Result<(S, Tensor<S>)> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let lp = self.log_prob_var(&xv)?.sum()?;
        let g = grad(&lp, &[&xv], false)?.remove(0);
        Ok((lp.item()?, g.into_value()))
    }

    pub fn grad_log_prob(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.value_and_grad(x)?.1)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let (z, ld) = self.forward_with(&self.params.bind(None), &Var::constant(x.clone()))?;
        Ok((z.into_value(), ld.into_value()))
    }

    pub fn inverse(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let params = self.params.bind(None);
        let mut x = self.as_batch(&Var::constant(z.clone()))?;
        for layer in self.layers.iter().rev() {
            x = layer.inverse(&params, &x)?;
        }
        Ok(x.into_value())
    }

    /// `count` draws pushed through the inverse flow, each a 1-D tensor.
    pub fn sample(&self, rng: &mut SeededRng, count: usize) -> Result<Vec<Tensor<S>>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let z = rng.normal_tensor::<S>([count, self.dim], 1.0);
        let x = self.inverse(&z)?;
        (0..count).map(|i| x.row(i)).collect()
    }
}

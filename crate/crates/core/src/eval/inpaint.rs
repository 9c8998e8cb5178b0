//! Classical removers: harmonic (heat-diffusion) inpainting and a blind
//! tone-threshold detector in front of it.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::metrics::image_dims;

pub const DEFAULT_HEAT_ITERATIONS: usize = 400;
/// Over-relaxation factor of the Gauss-Seidel sweeps.
const OMEGA: f64 = 1.8;

/// Replaces `masked` pixels by the harmonic interpolation of the rest.
///
/// Runs `iterations` over-relaxed neighbour-averaging sweeps; observed pixels
/// are never modified. Masked pixels start at the mean of the observed ones.
pub fn heat_diffusion_inpaint<S: Real>(y: &Tensor<S>, masked: &[bool], iterations: usize) -> Result<Tensor<S>> {
    if iterations == 0 {
        return Err(Error::invalid("heat diffusion needs at least one iteration"));
    }
    if masked.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "heat_diffusion_inpaint",
            lhs: vec![masked.len()],
            rhs: y.shape().to_vec(),
        });
    }
    let (h, w) = image_dims(y.shape())?;
    let mut x = y.to_f64_vec();
    let observed: Vec<f64> = x.iter().zip(masked).filter(|(_, m)| !**m).map(|(v, _)| *v).collect();
    let fill = if observed.is_empty() {
        0.5
    } else {
        observed.iter().sum::<f64>() / observed.len() as f64
    };
    let holes: Vec<usize> = (0..x.len()).filter(|&k| masked[k]).collect();
    for &k in &holes {
        x[k] = fill;
    }
    for _ in 0..iterations {
        for &k in &holes {
            let (r, c) = (k / w, k % w);
            let (mut sum, mut count) = (0.0, 0.0);
            if r > 0 {
                sum += x[k - w];
                count += 1.0;
            }
            if r + 1 < h {
                sum += x[k + w];
                count += 1.0;
            }
            if c > 0 {
                sum += x[k - 1];
                count += 1.0;
            }
            if c + 1 < w {
                sum += x[k + 1];
                count += 1.0;
            }
            x[k] += OMEGA * (sum / count - x[k]);
        }
    }
    Tensor::from_f64(y.shape().to_vec(), &x)
}

/// Tone-threshold watermark detector settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlindThreshold {
    pub tone: f64,
    pub band: f64,
    /// Components must be strictly larger than this many pixels.
    pub min_component: usize,
    pub iterations: usize,
}

impl BlindThreshold {
    pub fn new(tone: f64) -> Self {
        Self {
            tone,
            band: 0.05,
            min_component: 8,
            iterations: DEFAULT_HEAT_ITERATIONS,
        }
    }

    /// Pixels within `band` of the tone that belong to a large enough
    /// 4-connected component.
    pub fn detect<S: Real>(&self, image: &Tensor<S>) -> Result<Vec<bool>> {
        let (h, w) = image_dims(image.shape())?;
        let near: Vec<bool> = image
            .data()
            .iter()
            .map(|v| (v.as_f64() - self.tone).abs() <= self.band)
            .collect();
        let mut label = vec![usize::MAX; near.len()];
        let mut keep = vec![false; near.len()];
        let mut stack = Vec::new();
        let mut members = Vec::new();
        for seed in 0..near.len() {
            if !near[seed] || label[seed] != usize::MAX {
                continue;
            }
            members.clear();
            stack.push(seed);
            label[seed] = seed;
            while let Some(k) = stack.pop() {
                members.push(k);
                let (r, c) = (k / w, k % w);
                let mut visit = |n: usize| {
                    if near[n] && label[n] == usize::MAX {
                        label[n] = seed;
                        stack.push(n);
                    }
                };
                if r > 0 {
                    visit(k - w);
                }
                if r + 1 < h {
                    visit(k + w);
                }
                if c > 0 {
                    visit(k - 1);
                }
                if c + 1 < w {
                    visit(k + 1);
                }
            }
            if members.len() > self.min_component {
                for &k in &members {
                    keep[k] = true;
                }
            }
        }
        Ok(keep)
    }

    /// Detects, then inpaints; an image with nothing detected is returned as is.
    pub fn remove<S: Real>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let mask = self.detect(image)?;
        if !mask.iter().any(|m| *m) {
            return Ok(image.clone());
        }
        heat_diffusion_inpaint(image, &mask, self.iterations)
    }
}

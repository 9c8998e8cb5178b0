use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn eval<S: Real>(self, a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(a, b),
            Metric::Ssim => ssim(a, b),
        }
    }
}

fn same_shape<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

pub fn mse<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log₁₀(1/MSE)` for unit peak, capped at [`PSNR_CAP`].
pub fn psnr<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

/// PSNR of a tracked reconstruction against a fixed reference. At zero error
/// the cap is returned as a constant (no gradient).
pub fn psnr_var<S: Real>(x: &Var<S>, truth: &Tensor<S>) -> Result<Var<S>> {
    if x.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: x.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let err = x.sub(&Var::constant(truth.clone()))?.square()?.mean()?;
    let m = err.item()?.as_f64();
    if m == 0.0 || -10.0 * m.log10() >= PSNR_CAP {
        return Ok(Var::scalar(S::lit(PSNR_CAP)));
    }
    err.log()?.mul_scalar(S::lit(-10.0 / std::f64::consts::LN_10))
}

/// `(height, width)` of a `[h, w]` tensor or a square flat one.
pub fn image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [n] => {
            let s = (*n as f64).sqrt().round() as usize;
            if s * s == *n {
                Ok((s, s))
            } else {
                Err(Error::invalid(format!("{n} pixels do not form a square image")))
            }
        }
        _ => Err(Error::invalid(format!("expected an image, got shape {shape:?}"))),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all positions where the 11×11 window fits inside the image.
pub fn ssim<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w) = image_dims(a.shape())?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let win = gaussian_window();
    let x = a.to_f64_vec();
    let y = b.to_f64_vec();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, wi) in win.iter().enumerate() {
                for (j, wj) in win.iter().enumerate() {
                    let k = (r + i) * w + c + j;
                    let wt = wi * wj;
                    mx += wt * x[k];
                    my += wt * y[k];
                    xx += wt * x[k] * x[k];
                    yy += wt * y[k] * y[k];
                    xy += wt * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `metric(x̂, x_T) - metric(input, x_T)`: what the remover gained over its input.
pub fn v_metric<S: Real>(recon: &Tensor<S>, input: &Tensor<S>, truth: &Tensor<S>, metric: Metric) -> Result<f64> {
    Ok(metric.eval(recon, truth)? - metric.eval(input, truth)?)
}

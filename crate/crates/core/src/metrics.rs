//! Evaluation metrics on image pairs and a latent distribution diagnostic.
//!
//! All metrics are computed in f64 outside the autograd graph.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::geometry::ImageBatch;
use crate::losses::{perceptual_loss, FeatureExtractor};
use crate::map2style::LatentCodes;

/// Peak-to-peak range of images in `[-1, 1]`.
pub const DATA_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

pub fn mse(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    check_pair(x, y)?;
    let d = (x.tensor() - y.tensor())?.sqr()?.mean_all()?;
    Ok(d.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()
    }
}

pub fn psnr(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// Luminance planes `[batch][h*w]` with BT.601 weights.
pub fn luminance(img: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let t = img.tensor().to_dtype(DType::F64)?;
    let coef = Tensor::new(&[0.299f64, 0.587, 0.114], t.device())?.reshape((1, 3, 1, 1))?;
    let y = t.broadcast_mul(&coef)?.sum(1)?.flatten_from(1)?;
    Ok(y.to_vec2::<f64>()?)
}

/// Mean SSIM over every 8×8 window (stride 1) of the luminance planes,
/// averaged over the batch. Window statistics use population (1/N) moments.
pub fn ssim(x: &ImageBatch, y: &ImageBatch) -> Result<f64> {
    check_pair(x, y)?;
    let side = x.side();
    if side < SSIM_WINDOW {
        return shape_err(format!("SSIM needs images of side ≥ {SSIM_WINDOW}, got {side}"));
    }
    let (lx, ly) = (luminance(x)?, luminance(y)?);
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let mut total = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        let ia = Integral::new(side, |i| a[i]);
        let ib = Integral::new(side, |i| b[i]);
        let iaa = Integral::new(side, |i| a[i] * a[i]);
        let ibb = Integral::new(side, |i| b[i] * b[i]);
        let iab = Integral::new(side, |i| a[i] * b[i]);
        let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
        let last = side - SSIM_WINDOW;
        let mut acc = 0.0;
        for r in 0..=last {
            for c in 0..=last {
                let mx = ia.window(r, c) / n;
                let my = ib.window(r, c) / n;
                let vx = iaa.window(r, c) / n - mx * mx;
                let vy = ibb.window(r, c) / n - my * my;
                let cxy = iab.window(r, c) / n - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / ((last + 1) * (last + 1)) as f64;
    }
    Ok(total / lx.len() as f64)
}

/// Summed-area table for O(1) window sums.
struct Integral {
    side: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(side: usize, f: impl Fn(usize) -> f64) -> Self {
        let s1 = side + 1;
        let mut table = vec![0.0; s1 * s1];
        for r in 0..side {
            let mut row = 0.0;
            for c in 0..side {
                row += f(r * side + c);
                table[(r + 1) * s1 + c + 1] = table[r * s1 + c + 1] + row;
            }
        }
        Self { side, table }
    }

    fn window(&self, r: usize, c: usize) -> f64 {
        let s1 = self.side + 1;
        let k = SSIM_WINDOW;
        let at = |r: usize, c: usize| self.table[r * s1 + c];
        at(r + k, c + k) - at(r, c + k) - at(r + k, c) + at(r, c)
    }
}

pub fn evaluate(x: &ImageBatch, y: &ImageBatch, features: &dyn FeatureExtractor) -> Result<EvalMetrics> {
    let m = mse(x, y)?;
    let perceptual = perceptual_loss(&x.tensor().detach(), &y.tensor().detach(), features)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok(EvalMetrics {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(x, y)?,
        perceptual,
    })
}

/// Per-image MSE, `[batch]`.
pub fn per_image_mse(x: &ImageBatch, y: &ImageBatch) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let d = (x.tensor() - y.tensor())?.sqr()?.flatten_from(1)?.mean(D::Minus1)?;
    Ok(d.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Symmetric KL between the batch-averaged softmax of every code row and that
/// of the style vectors `w` (`[m, style_dim]`).
pub fn distribution_gap(codes: &LatentCodes, w: &Tensor) -> Result<f64> {
    let d = codes.style_dim();
    if w.rank() != 2 || w.dim(1)? != d || w.dim(0)? == 0 {
        return shape_err(format!(
            "distribution gap needs style vectors [m, {d}], got {:?}",
            w.dims()
        ));
    }
    let rows = codes.tensor().detach().to_dtype(DType::F64)?.reshape(((), d))?;
    let p = candle_nn::ops::softmax(&rows, D::Minus1)?.mean(0)?.to_vec1::<f64>()?;
    let q = candle_nn::ops::softmax(&w.detach().to_dtype(DType::F64)?, D::Minus1)?
        .mean(0)?
        .to_vec1::<f64>()?;
    let kl = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(a, b)| a * (a / b).ln()).sum() };
    Ok((kl(&p, &q) + kl(&q, &p)).max(0.0))
}

fn check_pair(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.tensor().dims() != y.tensor().dims() {
        return shape_err(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.tensor().dims(),
            y.tensor().dims()
        ));
    }
    Ok(())
}

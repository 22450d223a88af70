//! Distortion measures, cross-entropy leakage surrogates and the two training
//! losses.
//!
//! All losses are batch means and use the natural logarithm. Probabilities
//! are clamped below at [`PROB_FLOOR`] before taking logs.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryLogits, Posterior};
use crate::error::{Error, Result};
use crate::nn::log_softmax;

pub const PROB_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const SSIM_RANGE: f64 = 1.0;

pub fn ssim_c1() -> f64 {
    (SSIM_K1 * SSIM_RANGE).powi(2)
}

pub fn ssim_c2() -> f64 {
    (SSIM_K2 * SSIM_RANGE).powi(2)
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn check_same(u: &Tensor, v: &Tensor) -> Result<()> {
    if u.dims() != v.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", u.dims(), v.dims())));
    }
    Ok(())
}

/// Mean squared error over all pixels and the batch.
pub fn mse(u: &Tensor, u_hat: &Tensor) -> Result<Tensor> {
    check_same(u, u_hat)?;
    Ok((u - u_hat)?.sqr()?.mean_all()?)
}

/// Per-image mean squared error, `(batch,)`.
pub fn mse_per_image(u: &Tensor, u_hat: &Tensor) -> Result<Tensor> {
    check_same(u, u_hat)?;
    Ok((u - u_hat)?.sqr()?.flatten_from(1)?.mean(1)?)
}

/// `(n, n - SSIM_WINDOW + 1)` matrix whose column `j` holds the Gaussian taps
/// at rows `j..j + SSIM_WINDOW`, so `x @ band` is a valid-mode 1-D filter.
fn gaussian_band(n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let out = n - SSIM_WINDOW + 1;
    let mut band = vec![0.0; n * out];
    for j in 0..out {
        for (t, v) in taps.iter().enumerate() {
            band[(j + t) * out + j] = *v;
        }
    }
    Ok(Tensor::from_vec(band, (n, out), dev)?.to_dtype(dtype)?)
}

/// Valid-mode separable Gaussian filtering of `(N, H, W)`.
fn gaussian_blur(x: &Tensor, band_h: &Tensor, band_w: &Tensor) -> Result<Tensor> {
    let (n, h, w) = x.dims3()?;
    let (oh, ow) = (band_h.dims()[1], band_w.dims()[1]);
    let rows = x.reshape((n * h, w))?.matmul(band_w)?.reshape((n, h, ow))?;
    let cols = rows.transpose(1, 2)?.contiguous()?.reshape((n * ow, h))?.matmul(band_h)?;
    Ok(cols.reshape((n, ow, oh))?.transpose(1, 2)?.contiguous()?)
}

/// SSIM index per window, `(batch, C, H - 10, W - 10)`, on `(batch, C, H, W)` inputs.
pub fn ssim_map(u: &Tensor, u_hat: &Tensor) -> Result<Tensor> {
    check_same(u, u_hat)?;
    let (b, c, h, w) = u.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let x = u.reshape((b * c, h, w))?;
    let y = u_hat.reshape((b * c, h, w))?;
    let band_h = gaussian_band(h, u.dtype(), u.device())?;
    let band_w = gaussian_band(w, u.dtype(), u.device())?;
    let blur = |t: &Tensor| gaussian_blur(t, &band_h, &band_w);
    let mx = blur(&x)?;
    let my = blur(&y)?;
    let mx2 = mx.sqr()?;
    let my2 = my.sqr()?;
    let mxy = (&mx * &my)?;
    let sxx = (blur(&x.sqr()?)? - &mx2)?;
    let syy = (blur(&y.sqr()?)? - &my2)?;
    let sxy = (blur(&(&x * &y)?)? - &mxy)?;
    let (c1, c2) = (ssim_c1(), ssim_c2());
    let num = (mxy.affine(2.0, c1)? * sxy.affine(2.0, c2)?)?;
    let den = ((mx2 + my2)?.affine(1.0, c1)? * (sxx + syy)?.affine(1.0, c2)?)?;
    let map = (num / den)?;
    let (_, oh, ow) = map.dims3()?;
    Ok(map.reshape((b, c, oh, ow))?)
}

/// Mean SSIM of each image over windows and channels, `(batch,)`.
pub fn ssim_per_image(u: &Tensor, u_hat: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(u, u_hat)?.flatten_from(1)?.mean(1)?)
}

/// SSIM averaged over windows, channels and the batch.
pub fn ssim(u: &Tensor, u_hat: &Tensor) -> Result<Tensor> {
    Ok(ssim_map(u, u_hat)?.mean_all()?)
}

/// `mse + alpha * (1 - ssim)`.
pub fn distortion(u: &Tensor, u_hat: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(distortion_parts(u, u_hat, alpha)?.0)
}

/// The distortion together with its MSE and SSIM components.
fn distortion_parts(u: &Tensor, u_hat: &Tensor, alpha: f64) -> Result<(Tensor, Tensor, Tensor)> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let m = mse(u, u_hat)?;
    let s = ssim(u, u_hat)?;
    let d = (&m + s.affine(-alpha, alpha)?)?;
    Ok((d, m, s))
}

/// The uniform distribution over `L` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformPrior {
    vector: Vec<f64>,
}

impl UniformPrior {
    pub fn new(num_classes: usize) -> Self {
        UniformPrior {
            vector: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    /// Broadcast to `(batch, L)`.
    pub fn to_tensor(&self, batch: usize, dtype: DType) -> Result<Tensor> {
        let l = self.vector.len();
        Ok(Tensor::full(1.0 / l as f64, (batch, l), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

fn check_target(target: &Tensor) -> Result<()> {
    for (i, row) in target.to_dtype(DType::F64)?.to_vec2::<f64>()?.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|t| !(*t >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Distribution(format!("target row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// `H(q, target) = -sum_l target_l ln max(q_l, 1e-12)`, batch mean.
pub fn cross_entropy(q: &Posterior, target: &Tensor) -> Result<Tensor> {
    check_same(q.probs(), target)?;
    check_target(target)?;
    let logq = q.probs().maximum(PROB_FLOOR)?.log()?;
    Ok((target * logq)?.sum(1)?.neg()?.mean_all()?)
}

/// Same value as [`cross_entropy`] of `softmax(logits)`, computed through a
/// log-softmax so that gradients stay finite for saturated posteriors.
pub fn cross_entropy_logits(logits: &AdversaryLogits, target: &Tensor) -> Result<Tensor> {
    check_same(&logits.logits, target)?;
    let logq = log_softmax(&logits.logits)?.maximum(PROB_FLOOR.ln())?;
    Ok((target * logq)?.sum(1)?.neg()?.mean_all()?)
}

/// Eavesdropper loss: one-hot cross-entropy of its own posterior.
pub fn adversary_loss(logits: &AdversaryLogits, one_hot: &Tensor) -> Result<Tensor> {
    cross_entropy_logits(logits, one_hot)
}

/// Scalar breakdown of one legitimate-loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub distortion: f64,
    pub mse: f64,
    pub ssim: f64,
    /// Cross-entropy entering the leakage term for each posterior: against
    /// the truth without ALC, against the uniform prior with ALC.
    pub per_adversary_ce: Vec<f64>,
    pub alc: bool,
}

impl LossReport {
    /// Recomputes `total` from the components.
    pub fn recompose(&self, weights: &[f64]) -> f64 {
        let m = self.per_adversary_ce.len() as f64;
        let leak: f64 = weights.iter().zip(&self.per_adversary_ce).map(|(w, c)| w * c).sum::<f64>() / m;
        if self.alc {
            self.distortion + leak
        } else {
            self.distortion - leak
        }
    }
}

pub struct LegitLoss {
    pub loss: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Alice–Bob loss over the eavesdropper posteriors given as `logits`.
///
/// Without ALC: `d(u, u_hat) - (1/M) sum_m w_m H(q_m, one_hot)`.
/// With ALC: `d(u, u_hat) + (1/M) sum_m w_m H(q_m, uniform)`.
pub fn legit_loss(
    u: &Tensor,
    u_hat: &Tensor,
    logits: &[AdversaryLogits],
    one_hot: &Tensor,
    weights: &[f64],
    alpha: f64,
    use_alc: bool,
) -> Result<LegitLoss> {
    if logits.is_empty() || logits.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} posteriors for {} leakage weights",
            logits.len(),
            weights.len()
        )));
    }
    let (d, m, s) = distortion_parts(u, u_hat, alpha)?;
    let target = if use_alc {
        let (b, l) = one_hot.dims2()?;
        UniformPrior::new(l).to_tensor(b, one_hot.dtype())?
    } else {
        one_hot.clone()
    };
    let sign = if use_alc { 1.0 } else { -1.0 };
    let scale = sign / logits.len() as f64;
    let mut total = d.clone();
    let mut ces = Vec::with_capacity(logits.len());
    for (l, w) in logits.iter().zip(weights) {
        let ce = cross_entropy_logits(l, &target)?;
        ces.push(scalar(&ce)?);
        total = (total + ce.affine(scale * w, 0.0)?)?;
    }
    let report = LossReport {
        total: scalar(&total)?,
        distortion: scalar(&d)?,
        mse: scalar(&m)?,
        ssim: scalar(&s)?,
        per_adversary_ce: ces,
        alc: use_alc,
    };
    Ok(LegitLoss { loss: total, report })
}

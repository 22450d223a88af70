//! Power normalisation and the stochastic MISO channel.
//!
//! Complex tensors are carried as separate real and imaginary parts so that
//! gradients flow through the channel like any other real-valued op. Gains
//! and noise are sampled on the host from explicit RNG streams and enter the
//! graph as constants.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::config::{ChannelFamily, ChannelSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A complex tensor as a pair of equally shaped real tensors.
#[derive(Clone, Debug)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.dims() != im.dims() {
            return Err(Error::Shape(format!(
                "real part {:?} and imaginary part {:?} differ",
                re.dims(),
                im.dims()
            )));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn dims(&self) -> &[usize] {
        self.re.dims()
    }

    pub fn dtype(&self) -> DType {
        self.re.dtype()
    }

    /// `|z|^2` elementwise.
    pub fn abs2(&self) -> Result<Tensor> {
        Ok((self.re.sqr()? + self.im.sqr()?)?)
    }

    pub fn detach(&self) -> Self {
        ComplexTensor {
            re: self.re.detach(),
            im: self.im.detach(),
        }
    }

    /// Host copy as `(re, im)` pairs in row-major order.
    pub fn to_pairs(&self) -> Result<Vec<(f64, f64)>> {
        let re = self.re.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let im = self.im.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(re.into_iter().zip(im).collect())
    }
}

/// Normalised channel input, `(batch, n_T, k)`.
#[derive(Clone, Debug)]
pub struct Codeword {
    symbols: ComplexTensor,
}

impl Codeword {
    pub fn symbols(&self) -> &ComplexTensor {
        &self.symbols
    }

    pub fn batch(&self) -> usize {
        self.symbols.dims()[0]
    }

    pub fn n_t(&self) -> usize {
        self.symbols.dims()[1]
    }

    pub fn k(&self) -> usize {
        self.symbols.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Codeword {
            symbols: self.symbols.detach(),
        }
    }

    /// `(1/k) sum_t ||x_t||^2` for every sample.
    pub fn per_sample_power(&self) -> Result<Vec<f64>> {
        let k = self.k() as f64;
        Ok(self
            .symbols
            .abs2()?
            .to_dtype(DType::F64)?
            .sum((1, 2))?
            .to_vec1::<f64>()?
            .into_iter()
            .map(|e| e / k)
            .collect())
    }

    /// Largest relative deviation of any sample's power from `power`.
    pub fn power_deviation(&self, power: f64) -> Result<f64> {
        Ok(self
            .per_sample_power()?
            .into_iter()
            .map(|p| ((p - power) / power).abs())
            .fold(0.0, f64::max))
    }
}

/// Scales every sample of `raw` (`(batch, n_T, k)`) to average power `power`.
pub fn power_normalize(raw: &ComplexTensor, power: f64) -> Result<Codeword> {
    let dims = raw.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("codeword must be (batch, n_T, k), got {dims:?}")));
    }
    if !(power.is_finite() && power > 0.0) {
        return Err(Error::Channel(format!("power must be positive, got {power}")));
    }
    let (b, k) = (dims[0], dims[2]);
    // accumulate in f64 so the constraint holds tightly for f32 codewords
    let energy = raw.abs2()?.to_dtype(DType::F64)?.sum((1, 2))?;
    let host = energy.to_vec1::<f64>()?;
    if let Some(i) = host.iter().position(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Channel(format!(
            "sample {i} has energy {}; cannot normalise",
            host[i]
        )));
    }
    let scale = energy
        .sqrt()?
        .recip()?
        .affine((k as f64 * power).sqrt(), 0.0)?
        .to_dtype(raw.dtype())?
        .reshape((b, 1, 1))?;
    Ok(Codeword {
        symbols: ComplexTensor {
            re: raw.re.broadcast_mul(&scale)?,
            im: raw.im.broadcast_mul(&scale)?,
        },
    })
}

/// Noise variance `P * 10^(-snr/10)` for a transmit SNR in dB.
pub fn snr_db_to_noise_var(snr_db: f64, power: f64) -> f64 {
    power * 10f64.powf(-snr_db / 10.0)
}

/// Per-image gain vectors `h`, `(batch, n_T)`, constant over the `k` uses.
#[derive(Clone, Debug)]
pub struct ChannelGains {
    h: ComplexTensor,
}

impl ChannelGains {
    pub fn from_values(values: &[(f64, f64)], batch: usize, n_t: usize, dtype: DType) -> Result<Self> {
        if values.len() != batch * n_t {
            return Err(Error::Shape(format!("{} gains for {batch}x{n_t}", values.len())));
        }
        let re: Vec<f64> = values.iter().map(|v| v.0).collect();
        let im: Vec<f64> = values.iter().map(|v| v.1).collect();
        let dev = Device::Cpu;
        Ok(ChannelGains {
            h: ComplexTensor {
                re: Tensor::from_vec(re, (batch, n_t), &dev)?.to_dtype(dtype)?,
                im: Tensor::from_vec(im, (batch, n_t), &dev)?.to_dtype(dtype)?,
            },
        })
    }

    pub fn h(&self) -> &ComplexTensor {
        &self.h
    }

    pub fn values(&self) -> Result<Vec<(f64, f64)>> {
        self.h.to_pairs()
    }
}

/// `count` independent gain draws for `spec`'s fading family.
pub fn sample_gain_values(spec: &ChannelSpec, count: usize, rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    Ok(match spec.family {
        ChannelFamily::Awgn => vec![(1.0, 0.0); count],
        ChannelFamily::Rayleigh => {
            let s = 0.5f64.sqrt();
            (0..count)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    (s * re, s * im)
                })
                .collect()
        }
        ChannelFamily::Nakagami => {
            let m = spec.nakagami_m;
            // |h|^2 ~ Gamma(m, 1/m), unit mean power
            let gamma = Gamma::new(m, 1.0 / m).map_err(|e| Error::Channel(e.to_string()))?;
            (0..count)
                .map(|_| {
                    let amp = gamma.sample(rng).sqrt();
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (amp * phase.cos(), amp * phase.sin())
                })
                .collect()
        }
    })
}

pub fn sample_gains(spec: &ChannelSpec, n_t: usize, batch: usize, rng: &mut Rng, dtype: DType) -> Result<ChannelGains> {
    let values = sample_gain_values(spec, batch * n_t, rng)?;
    ChannelGains::from_values(&values, batch, n_t, dtype)
}

/// Channel output at one receiver, `(batch, k)`.
#[derive(Clone, Debug)]
pub struct ReceivedSignal {
    samples: ComplexTensor,
}

impl ReceivedSignal {
    pub fn new(samples: ComplexTensor) -> Result<Self> {
        if samples.dims().len() != 2 {
            return Err(Error::Shape(format!(
                "received signal must be (batch, k), got {:?}",
                samples.dims()
            )));
        }
        Ok(ReceivedSignal { samples })
    }

    pub fn samples(&self) -> &ComplexTensor {
        &self.samples
    }

    pub fn batch(&self) -> usize {
        self.samples.dims()[0]
    }

    pub fn k(&self) -> usize {
        self.samples.dims()[1]
    }

    pub fn detach(&self) -> Self {
        ReceivedSignal {
            samples: self.samples.detach(),
        }
    }

    /// Interleaved `(re, im)` pairs, `(batch, 2k)`.
    pub fn interleaved(&self) -> Result<Tensor> {
        let (b, k) = (self.batch(), self.k());
        Ok(Tensor::stack(&[&self.samples.re, &self.samples.im], 2)?.reshape((b, 2 * k))?)
    }
}

/// Circularly-symmetric complex Gaussian noise of total variance `noise_var`.
pub fn sample_noise(batch: usize, k: usize, noise_var: f64, rng: &mut Rng, dtype: DType) -> Result<ComplexTensor> {
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::Channel(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let s = (noise_var / 2.0).sqrt();
    let mut draw = || -> Result<Tensor> {
        let v: Vec<f64> = (0..batch * k)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Tensor::from_vec(v, (batch, k), &Device::Cpu)?.to_dtype(dtype)?)
    };
    let re = draw()?;
    let im = draw()?;
    ComplexTensor::new(re, im)
}

/// Noise-free combining `y_t = h^T x_t`.
pub fn combine(x: &Codeword, gains: &ChannelGains) -> Result<ComplexTensor> {
    let (b, n_t) = (x.batch(), x.n_t());
    let hd = gains.h.dims();
    if hd != [b, n_t] {
        return Err(Error::Shape(format!("gains {hd:?} do not match codeword ({b}, {n_t}, _)")));
    }
    let hr = gains.h.re.reshape((b, n_t, 1))?;
    let hi = gains.h.im.reshape((b, n_t, 1))?;
    let xs = &x.symbols;
    let re = (xs.re.broadcast_mul(&hr)? - xs.im.broadcast_mul(&hi)?)?.sum(1)?;
    let im = (xs.im.broadcast_mul(&hr)? + xs.re.broadcast_mul(&hi)?)?.sum(1)?;
    ComplexTensor::new(re, im)
}

/// `y_t = h^T x_t + n_t` with the given noise realisation.
pub fn apply_channel_with_noise(x: &Codeword, gains: &ChannelGains, noise: &ComplexTensor) -> Result<ReceivedSignal> {
    let y = combine(x, gains)?;
    if noise.dims() != y.dims() {
        return Err(Error::Shape(format!("noise {:?} vs signal {:?}", noise.dims(), y.dims())));
    }
    ReceivedSignal::new(ComplexTensor::new((y.re + &noise.re)?, (y.im + &noise.im)?)?)
}

/// `y_t = h^T x_t + n_t` with fresh noise of variance `noise_var`.
pub fn apply_channel(x: &Codeword, gains: &ChannelGains, noise_var: f64, rng: &mut Rng) -> Result<ReceivedSignal> {
    let noise = sample_noise(x.batch(), x.k(), noise_var, rng, x.symbols.dtype())?;
    apply_channel_with_noise(x, gains, &noise)
}

/// Samples gains and noise for `spec` and passes `x` through the channel.
pub fn transmit(x: &Codeword, spec: &ChannelSpec, rng: &mut Rng) -> Result<ReceivedSignal> {
    let gains = sample_gains(spec, x.n_t(), x.batch(), rng, x.symbols.dtype())?;
    apply_channel(x, &gains, snr_db_to_noise_var(spec.snr_db, spec.power), rng)
}

//! The neural encoder (image to multi-antenna codeword) and decoder
//! (received signal to image).
//!
//! Encoder: four 5x5 convolutions with PReLU, strides (2, 2, 1, 1), filters
//! 16, 32, 32 and a head wide enough that the last activation holds exactly
//! `2 k n_T` values. The flattened activation is split into `n_T` contiguous
//! antenna streams of `2k` reals each, consecutive values forming one
//! `(re, im)` symbol, and then power-normalised.
//!
//! Decoder: the `2k` received reals (interleaved re/im) are laid out on an
//! `(H/4, W/4)` grid and passed through two 5x5 PReLU convolutions followed by
//! two sub-pixel upsampling stages, ending in a sigmoid.

use candle_core::{DType, Tensor};

use crate::channel::{power_normalize, Codeword, ComplexTensor, ReceivedSignal};
use crate::config::{ImageDims, ValidatedConfig};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{pixel_shuffle, sigmoid, Conv2d, ParamSet, Prelu, Track};
use crate::rng::{self, Stream};

const KERNEL: usize = 5;
const FILTERS: [usize; 3] = [16, 32, 32];

/// Spatial grid `(H/4, W/4)` shared by the encoder head, the decoder input
/// and the adversary input.
pub fn latent_grid(dims: ImageDims) -> Result<(usize, usize)> {
    if dims.height % 4 != 0 || dims.width % 4 != 0 {
        return Err(Error::Config(format!(
            "image {}x{} is not divisible by the encoder's total stride of 4",
            dims.height, dims.width
        )));
    }
    Ok((dims.height / 4, dims.width / 4))
}

/// Channels needed to hold `values` reals on the latent grid.
fn grid_channels(values: usize, dims: ImageDims, what: &str) -> Result<usize> {
    let (h, w) = latent_grid(dims)?;
    if values % (h * w) != 0 {
        return Err(Error::Config(format!(
            "{what} of {values} values does not tile the {h}x{w} latent grid"
        )));
    }
    Ok(values / (h * w))
}

/// Lays `(batch, 2k)` received reals out as `(batch, c, H/4, W/4)`.
pub fn signal_to_grid(y: &ReceivedSignal, dims: ImageDims) -> Result<Tensor> {
    let (h, w) = latent_grid(dims)?;
    let c = grid_channels(2 * y.k(), dims, "received signal")?;
    Ok(y.interleaved()?.reshape((y.batch(), c, h, w))?)
}

/// Raw encoder activations, `(batch, 2 k n_T)`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub latent: Tensor,
}

impl EncoderOutput {
    /// Antenna `a` takes values `[2ka, 2k(a+1))`; pairs are `(re, im)`.
    pub fn to_complex(&self, n_t: usize, k: usize) -> Result<ComplexTensor> {
        let (b, len) = self.latent.dims2()?;
        if len != 2 * k * n_t {
            return Err(Error::Shape(format!("latent of {len} values, expected 2*{k}*{n_t}")));
        }
        let pairs = self.latent.reshape((b, n_t, k, 2))?;
        ComplexTensor::new(
            pairs.narrow(3, 0, 1)?.squeeze(3)?,
            pairs.narrow(3, 1, 1)?.squeeze(3)?,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    params: ParamSet,
    convs: Vec<Conv2d>,
    acts: Vec<Prelu>,
    n_t: usize,
    k: usize,
    power: f64,
}

impl Encoder {
    pub fn build(cfg: &ValidatedConfig, dtype: DType) -> Result<Self> {
        let (k, n_t) = (cfg.k(), cfg.n_t());
        let head = grid_channels(2 * k * n_t, cfg.dims(), "encoder output")?;
        let c = cfg.dims().channels;
        let convs = vec![
            Conv2d::new("conv1", c, FILTERS[0], KERNEL, 2),
            Conv2d::new("conv2", FILTERS[0], FILTERS[1], KERNEL, 2),
            Conv2d::new("conv3", FILTERS[1], FILTERS[2], KERNEL, 1),
            Conv2d::new("conv4", FILTERS[2], head, KERNEL, 1),
        ];
        let acts: Vec<Prelu> = convs
            .iter()
            .enumerate()
            .map(|(i, conv)| Prelu::new(&format!("prelu{}", i + 1), conv.out_channels))
            .collect();
        let mut params = ParamSet::new(dtype);
        let mut rng = rng::stream(cfg.config().seed, Stream::EncoderInit, 0);
        for (conv, act) in convs.iter().zip(&acts) {
            conv.init(&mut params, &mut rng)?;
            act.init(&mut params)?;
        }
        Ok(Encoder {
            params,
            convs,
            acts,
            n_t,
            k,
            power: cfg.power(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// `u` is `(batch, C, H, W)` in `[0, 1]`.
    pub fn forward(&self, u: &Tensor, track: Track) -> Result<EncoderOutput> {
        let mut h = u.clone();
        for (conv, act) in self.convs.iter().zip(&self.acts) {
            h = act.forward(&self.params, &conv.forward(&self.params, &h, track)?, track)?;
        }
        Ok(EncoderOutput {
            latent: h.flatten_from(1)?,
        })
    }

    pub fn encode_tensor(&self, u: &Tensor, track: Track) -> Result<Codeword> {
        let out = self.forward(u, track)?;
        power_normalize(&out.to_complex(self.n_t, self.k)?, self.power)
    }

    pub fn encode(&self, u: &ImageBatch, track: Track) -> Result<Codeword> {
        let t = u.to_tensor(self.params.dtype(), &candle_core::Device::Cpu)?;
        self.encode_tensor(&t, track)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    params: ParamSet,
    convs: Vec<Conv2d>,
    acts: Vec<Prelu>,
    dims: ImageDims,
    k: usize,
}

impl Decoder {
    pub fn build(cfg: &ValidatedConfig, dtype: DType) -> Result<Self> {
        let dims = cfg.dims();
        let c_in = grid_channels(2 * cfg.k(), dims, "decoder input")?;
        let convs = vec![
            Conv2d::new("conv1", c_in, FILTERS[2], KERNEL, 1),
            Conv2d::new("conv2", FILTERS[2], FILTERS[1], KERNEL, 1),
            Conv2d::new("up1", FILTERS[1], FILTERS[0] * 4, KERNEL, 1),
            Conv2d::new("up2", FILTERS[0], dims.channels * 4, KERNEL, 1),
        ];
        let acts = vec![
            Prelu::new("prelu1", FILTERS[2]),
            Prelu::new("prelu2", FILTERS[1]),
            Prelu::new("prelu3", FILTERS[0]),
        ];
        let mut params = ParamSet::new(dtype);
        let mut rng = rng::stream(cfg.config().seed, Stream::DecoderInit, 0);
        for conv in &convs {
            conv.init(&mut params, &mut rng)?;
        }
        for act in &acts {
            act.init(&mut params)?;
        }
        Ok(Decoder {
            params,
            convs,
            acts,
            dims,
            k: cfg.k(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Reconstruction `(batch, C, H, W)` in `[0, 1]`.
    pub fn forward(&self, y: &ReceivedSignal, track: Track) -> Result<Tensor> {
        if y.k() != self.k {
            return Err(Error::Shape(format!("received {} symbols, decoder expects {}", y.k(), self.k)));
        }
        let ps = &self.params;
        let mut h = signal_to_grid(y, self.dims)?;
        h = self.acts[0].forward(ps, &self.convs[0].forward(ps, &h, track)?, track)?;
        h = self.acts[1].forward(ps, &self.convs[1].forward(ps, &h, track)?, track)?;
        h = pixel_shuffle(&self.convs[2].forward(ps, &h, track)?, 2)?;
        h = self.acts[2].forward(ps, &h, track)?;
        h = pixel_shuffle(&self.convs[3].forward(ps, &h, track)?, 2)?;
        sigmoid(&h)
    }

    /// Reconstructed images carrying `labels` through.
    pub fn decode(&self, y: &ReceivedSignal, labels: Vec<usize>, num_classes: usize) -> Result<ImageBatch> {
        let t = self.forward(y, Track::Frozen)?;
        ImageBatch::from_tensor(&t, labels, num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate, TrainingConfig};
    use candle_core::Device;

    fn cfg() -> ValidatedConfig {
        validate(TrainingConfig::default(), ImageDims::CIFAR10, 10).unwrap()
    }

    #[test]
    fn encoder_emits_2k_nt_values() {
        let c = cfg();
        let enc = Encoder::build(&c, DType::F32).unwrap();
        let u = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let out = enc.forward(&u, Track::Frozen).unwrap();
        assert_eq!(out.latent.dims(), &[2, 2 * 1024 * 4]);
        let z = out.to_complex(4, 1024).unwrap();
        assert_eq!(z.dims(), &[2, 4, 1024]);
    }

    #[test]
    fn complex_pairing_is_consecutive() {
        let latent = Tensor::arange(0f64, 8.0, &Device::Cpu).unwrap().reshape((1, 8)).unwrap();
        let z = EncoderOutput { latent }.to_complex(2, 2).unwrap();
        assert_eq!(z.to_pairs().unwrap(), vec![(0., 1.), (2., 3.), (4., 5.), (6., 7.)]);
    }

    #[test]
    fn same_seed_same_init() {
        let a = Encoder::build(&cfg(), DType::F32).unwrap();
        let b = Encoder::build(&cfg(), DType::F32).unwrap();
        assert_eq!(a.params().digest().unwrap(), b.params().digest().unwrap());
        let mut other = TrainingConfig::default();
        other.seed = 1;
        let c = Encoder::build(&validate(other, ImageDims::CIFAR10, 10).unwrap(), DType::F32).unwrap();
        assert_ne!(a.params().digest().unwrap(), c.params().digest().unwrap());
    }

    #[test]
    fn untileable_head_is_rejected() {
        let mut t = TrainingConfig::default();
        t.link.k_over_n = crate::config::Ratio::new(1, 7);
        let c = validate(t, ImageDims::CIFAR10, 10).unwrap();
        assert!(Encoder::build(&c, DType::F32).is_err());
        assert!(Decoder::build(&c, DType::F32).is_err());
    }

    #[test]
    fn decoder_rejects_wrong_k() {
        let dec = Decoder::build(&cfg(), DType::F32).unwrap();
        let z = Tensor::zeros((1, 512), DType::F32, &Device::Cpu).unwrap();
        let y = ReceivedSignal::new(ComplexTensor::new(z.clone(), z).unwrap()).unwrap();
        assert!(dec.forward(&y, Track::Frozen).is_err());
    }
}

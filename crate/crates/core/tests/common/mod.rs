//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secure_jscc::config::Weights;
use secure_jscc::data::{synthetic, ImageBatch, CIFAR10_CLASSES};
use secure_jscc::rng::{self, Stream};
use secure_jscc::{validate, ImageDims, TrainingConfig, ValidatedConfig};

pub const SMALL: ImageDims = ImageDims {
    height: 16,
    width: 16,
    channels: 3,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Synthetic 32x32 images, balanced over classes.
pub fn cifar_like(count: usize, seed: u64) -> ImageBatch {
    let mut r = rng::stream(seed, Stream::Synthetic, 99);
    let mut pixels = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % CIFAR10_CLASSES;
        pixels.extend(synthetic::render(label, &mut r));
        labels.push(label);
    }
    ImageBatch::new(pixels, labels, ImageDims::CIFAR10, CIFAR10_CLASSES).unwrap()
}

/// Synthetic images average-pooled to 16x16, balanced over classes.
pub fn small_images(count: usize, seed: u64) -> ImageBatch {
    let big = cifar_like(count, seed);
    let mut pixels = Vec::with_capacity(count * SMALL.n());
    for i in 0..count {
        // records are (h, w, c)
        let img = big.image(i);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| img[(yy * 32 + xx) * 3 + c];
                    let (y2, x2) = (2 * y, 2 * x);
                    pixels.push((at(y2, x2) + at(y2 + 1, x2) + at(y2, x2 + 1) + at(y2 + 1, x2 + 1)) / 4.0);
                }
            }
        }
    }
    ImageBatch::new(pixels, big.labels().to_vec(), SMALL, CIFAR10_CLASSES).unwrap()
}

pub fn small_config(m: usize, colluding: bool, w: f64) -> ValidatedConfig {
    let mut cfg = TrainingConfig::default();
    cfg.secrecy.eavesdroppers = m;
    cfg.secrecy.colluding = colluding;
    cfg.secrecy.w = Weights::Shared(w);
    cfg.optim.batch_size = 16;
    cfg.optim.episodes = 1;
    cfg.checkpoint_every = 1;
    validate(cfg, SMALL, CIFAR10_CLASSES).unwrap()
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64, dtype: DType) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn normal_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut v = vec![0f64; labels.len() * classes];
    for (i, l) in labels.iter().enumerate() {
        v[i * classes + l] = 1.0;
    }
    Tensor::from_vec(v, (labels.len(), classes), &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Largest finite-difference mismatch of an autodiff gradient, measured as
/// `|a - n| / (max(|a|, |n|) + 1e-4)`. The additive `1e-4` absorbs the
/// round-off of a central difference on near-zero components.
pub struct GradCheck {
    pub coords: usize,
    pub eps: f64,
}

impl GradCheck {
    pub fn compare(&self, base: &[f64], analytic: &[f64], eval: impl Fn(Vec<f64>) -> f64) -> f64 {
        let n = base.len();
        let mut worst = 0.0f64;
        for j in 0..self.coords.min(n) {
            let i = (j * 7919 + 3) % n;
            let mut plus = base.to_vec();
            plus[i] += self.eps;
            let mut minus = base.to_vec();
            minus[i] -= self.eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * self.eps);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-4));
        }
        worst
    }

    /// Gradient of `f` with respect to its input at `x0`.
    pub fn input(&self, x0: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
        let var = candle_core::Var::from_tensor(x0).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let analytic = flat(grads.get(&var).expect("gradient reaches the input"));
        let shape = x0.dims().to_vec();
        self.compare(&flat(x0), &analytic, |v| {
            scalar(&f(&Tensor::from_vec(v, shape.as_slice(), x0.device()).unwrap()))
        })
    }

    /// Gradient of `f` with respect to a parameter, perturbed in place.
    pub fn param(&self, var: &candle_core::Var, f: impl Fn() -> Tensor) -> f64 {
        let original = var.as_tensor().copy().unwrap();
        let grads = f().backward().unwrap();
        let analytic = flat(grads.get(var).expect("gradient reaches the parameter"));
        let shape = original.dims().to_vec();
        let worst = self.compare(&flat(&original), &analytic, |v| {
            var.set(&Tensor::from_vec(v, shape.as_slice(), original.device()).unwrap()).unwrap();
            scalar(&f())
        });
        var.set(&original).unwrap();
        worst
    }
}

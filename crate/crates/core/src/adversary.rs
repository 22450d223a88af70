//! Eavesdropper classifiers and the colluding logit ensemble.

use candle_core::{DType, Device, Tensor};

use crate::channel::ReceivedSignal;
use crate::codec::{latent_grid, signal_to_grid};
use crate::config::{ImageDims, ValidatedConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax, Conv2d, Linear, ParamSet, Prelu, Track};
use crate::rng::{self, Stream};

const FILTERS: usize = 32;
const HIDDEN: usize = 128;

/// Pre-softmax class scores, `(batch, L)`.
#[derive(Clone, Debug)]
pub struct AdversaryLogits {
    pub logits: Tensor,
}

impl AdversaryLogits {
    pub fn new(logits: Tensor) -> Result<Self> {
        logits.dims2()?;
        Ok(AdversaryLogits { logits })
    }

    pub fn posterior(&self) -> Result<Posterior> {
        Ok(Posterior {
            probs: softmax(&self.logits)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.logits.dims()[0]
    }
}

/// Row-stochastic class probabilities, `(batch, L)`.
#[derive(Clone, Debug)]
pub struct Posterior {
    probs: Tensor,
}

impl Posterior {
    /// Checks that rows are nonnegative and sum to one within 1e-6.
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        let rows = probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Distribution(format!("posterior row {i} sums to {sum}")));
            }
        }
        Ok(Posterior { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.probs.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// Argmax per row; ties go to the lowest class index.
pub fn predict(p: &Posterior) -> Result<Vec<usize>> {
    Ok(p.rows()?.iter().map(|row| argmax(row)).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax over logits directly (softmax is monotone).
pub fn predict_logits(l: &AdversaryLogits) -> Result<Vec<usize>> {
    let rows = l.logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label count mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// `sum_m weights[m] * logits[m]`.
pub fn collude_aggregate(all: &[AdversaryLogits], weights: &Tensor) -> Result<AdversaryLogits> {
    let m = weights.dims1()?;
    if m != all.len() || m == 0 {
        return Err(Error::Shape(format!("{} logit sets for {m} collusion weights", all.len())));
    }
    let stacked = Tensor::stack(&all.iter().map(|l| &l.logits).collect::<Vec<_>>(), 0)?;
    let w = weights.to_dtype(stacked.dtype())?.reshape((m, 1, 1))?;
    AdversaryLogits::new(stacked.broadcast_mul(&w)?.sum(0)?)
}

/// Initial collusion weights `1/M`.
pub fn initial_collusion_weights(m: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::full(1.0 / m as f64, m, &Device::Cpu)?.to_dtype(dtype)?)
}

/// One eavesdropper's classifier over its received signal.
#[derive(Clone, Debug)]
pub struct Adversary {
    params: ParamSet,
    conv1: Conv2d,
    conv2: Conv2d,
    act1: Prelu,
    act2: Prelu,
    hidden: Linear,
    act3: Prelu,
    out: Linear,
    dims: ImageDims,
    k: usize,
}

impl Adversary {
    pub fn build(cfg: &ValidatedConfig, index: usize, dtype: DType) -> Result<Self> {
        let dims = cfg.dims();
        let (h, w) = latent_grid(dims)?;
        if (2 * cfg.k()) % (h * w) != 0 {
            return Err(Error::Config("received signal does not tile the latent grid".into()));
        }
        let c_in = 2 * cfg.k() / (h * w);
        let conv1 = Conv2d::new("conv1", c_in, FILTERS, 3, 1);
        let conv2 = Conv2d::new("conv2", FILTERS, FILTERS, 3, 2);
        let flat = FILTERS * conv2.output_size(h) * conv2.output_size(w);
        let act1 = Prelu::new("prelu1", FILTERS);
        let act2 = Prelu::new("prelu2", FILTERS);
        let hidden = Linear::new("dense1", flat, HIDDEN);
        let act3 = Prelu::new("prelu3", HIDDEN);
        let out = Linear::new("dense2", HIDDEN, cfg.num_classes());

        let mut params = ParamSet::new(dtype);
        let mut rng = rng::stream(cfg.config().seed, Stream::AdversaryInit(index), 0);
        conv1.init(&mut params, &mut rng)?;
        conv2.init(&mut params, &mut rng)?;
        hidden.init(&mut params, &mut rng)?;
        out.init(&mut params, &mut rng)?;
        for a in [&act1, &act2, &act3] {
            a.init(&mut params)?;
        }
        Ok(Adversary {
            params,
            conv1,
            conv2,
            act1,
            act2,
            hidden,
            act3,
            out,
            dims,
            k: cfg.k(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn forward(&self, z: &ReceivedSignal, track: Track) -> Result<AdversaryLogits> {
        if z.k() != self.k {
            return Err(Error::Shape(format!("received {} symbols, adversary expects {}", z.k(), self.k)));
        }
        let ps = &self.params;
        let x = signal_to_grid(z, self.dims)?;
        let h = self.act1.forward(ps, &self.conv1.forward(ps, &x, track)?, track)?;
        let h = self.act2.forward(ps, &self.conv2.forward(ps, &h, track)?, track)?;
        let h = h.flatten_from(1)?;
        let h = self.act3.forward(ps, &self.hidden.forward(ps, &h, track)?, track)?;
        AdversaryLogits::new(self.out.forward(ps, &h, track)?)
    }
}

pub fn build_adversaries(cfg: &ValidatedConfig, dtype: DType) -> Result<Vec<Adversary>> {
    (0..cfg.eavesdroppers()).map(|m| Adversary::build(cfg, m, dtype)).collect()
}

//! Named parameter sets and the small layer vocabulary the networks use.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

mod conv;

pub use conv::conv2d;

/// Whether a forward pass records gradients for a parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Grad,
    Frozen,
}

/// An ordered map of named trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamSet {
    pub fn new(dtype: DType) -> Self {
        ParamSet {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.insert(name.into(), var);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    /// The parameter as a graph node (`Track::Grad`) or as a constant.
    pub fn get(&self, name: &str, track: Track) -> Result<Tensor> {
        let var = self.var(name)?;
        Ok(match track {
            Track::Grad => var.as_tensor().clone(),
            Track::Frozen => var.as_tensor().detach(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if v.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: stored {:?}, expected {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamSet::new(self.dtype);
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn uniform(shape: &[usize], limit: f64, rng: &mut Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Glorot-uniform initialisation.
fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng, dtype: DType) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, limit, rng, dtype)
}

/// 2-D convolution with bias, NCHW.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `kernel`, "same" padding.
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        let w = glorot(&shape, self.in_channels * k2, self.out_channels * k2, rng, ps.dtype())?;
        ps.insert(format!("{}.weight", self.name), w)?;
        ps.insert(
            format!("{}.bias", self.name),
            Tensor::zeros(self.out_channels, ps.dtype(), &Device::Cpu)?,
        )?;
        Ok(())
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor, track: Track) -> Result<Tensor> {
        let w = ps.get(&format!("{}.weight", self.name), track)?;
        let b = ps.get(&format!("{}.bias", self.name), track)?;
        let y = conv2d(x, &w, self.padding, self.stride)?;
        Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?)
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Fully connected layer on `(batch, features)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            name: name.to_string(),
            inputs,
            outputs,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) -> Result<()> {
        let w = glorot(&[self.outputs, self.inputs], self.inputs, self.outputs, rng, ps.dtype())?;
        ps.insert(format!("{}.weight", self.name), w)?;
        ps.insert(
            format!("{}.bias", self.name),
            Tensor::zeros(self.outputs, ps.dtype(), &Device::Cpu)?,
        )?;
        Ok(())
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor, track: Track) -> Result<Tensor> {
        let w = ps.get(&format!("{}.weight", self.name), track)?;
        let b = ps.get(&format!("{}.bias", self.name), track)?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

/// Parametric ReLU with one slope per channel (dimension 1).
#[derive(Clone, Debug)]
pub struct Prelu {
    pub name: String,
    pub channels: usize,
}

impl Prelu {
    pub fn new(name: &str, channels: usize) -> Self {
        Prelu {
            name: name.to_string(),
            channels,
        }
    }

    pub fn init(&self, ps: &mut ParamSet) -> Result<()> {
        ps.insert(
            format!("{}.alpha", self.name),
            Tensor::full(0.25f32, self.channels, &Device::Cpu)?,
        )
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor, track: Track) -> Result<Tensor> {
        let alpha = ps.get(&format!("{}.alpha", self.name), track)?;
        let mut shape = vec![1; x.rank()];
        shape[1] = self.channels;
        let pos = x.relu()?;
        let neg = (x - &pos)?;
        Ok((pos + neg.broadcast_mul(&alpha.reshape(shape)?)?)?)
    }
}

/// Rearranges `(b, c*r*r, h, w)` into `(b, c, h*r, w*r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!("{c} channels cannot be shuffled by {r}")));
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(logits, D::Minus1)?)
}

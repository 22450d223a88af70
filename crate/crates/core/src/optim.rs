//! Adam with inspectable state, so checkpoints can resume exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    step: u64,
    /// First and second moment per parameter key.
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `(key, var)` that has a gradient in `grads`.
    pub fn step(&mut self, vars: &[(String, &Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (key, var) in vars {
            let Some(g) = grads.get(var) else { continue };
            let (m, v) = match self.moments.get(key) {
                Some((m, v)) => (
                    ((m * BETA1)? + (g * (1.0 - BETA1))?)?,
                    ((v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?,
                ),
                None => ((g * (1.0 - BETA1))?, (g.sqr()? * (1.0 - BETA2))?),
            };
            let denom = ((&v / c2)?.sqrt()? + EPSILON)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.moments.insert(key.clone(), (m, v));
        }
        Ok(())
    }

    /// Moments as named tensors (`m.<key>`, `v.<key>`).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("m.{k}"), m.clone());
            out.insert(format!("v.{k}"), v.clone());
        }
        out
    }

    pub fn restore(lr: f64, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, m) in tensors {
            if let Some(key) = name.strip_prefix("m.") {
                let v = tensors
                    .get(&format!("v.{key}"))
                    .ok_or_else(|| Error::Shape(format!("optimizer state lacks second moment for `{key}`")))?;
                moments.insert(key.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(Adam { lr, step, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g) (up to epsilon)
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let loss = (x.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&[("x".into(), &x)], &grads).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 2.1).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimises_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f32], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&[("x".into(), &x)], &grads).unwrap();
        }
        let v = x.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!(v.abs() < 0.05, "{v}");
    }

    #[test]
    fn state_round_trip() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let grads = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&[("x".into(), &x)], &grads).unwrap();
        let restored = Adam::restore(0.1, opt.steps(), &opt.state_tensors()).unwrap();
        assert_eq!(restored.steps(), 1);
        assert_eq!(restored.state_tensors().len(), 2);
    }
}

//! Python bindings: configuration, channel and objective helpers, and thin
//! wrappers over training and evaluation.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use secure_jscc::channel::{sample_gain_values, snr_db_to_noise_var as noise_var};
use secure_jscc::data::{load_dataset, synthetic, Split, CIFAR10_CLASSES};
use secure_jscc::evaluator::{eval_point, train_run};
use secure_jscc::rng::{self, Stream};
use secure_jscc::{load_checkpoint, validate, ChannelFamily, ChannelSpec, Error, ImageDims, TrainingConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Channel(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_config(toml: Option<&str>) -> PyResult<TrainingConfig> {
    match toml {
        Some(s) => TrainingConfig::from_toml_str(s).map_err(py_err),
        None => Ok(TrainingConfig::default()),
    }
}

/// Built-in defaults as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    TrainingConfig::default().to_toml_string().map_err(py_err)
}

/// Validates a TOML config for 32x32x3 images; returns `n`, `k`,
/// `n_t` and the fingerprint.
#[pyfunction]
#[pyo3(signature = (toml=None))]
fn validate_config(toml: Option<&str>) -> PyResult<HashMap<String, String>> {
    let cfg = validate(parse_config(toml)?, ImageDims::CIFAR10, CIFAR10_CLASSES).map_err(py_err)?;
    Ok(HashMap::from([
        ("n".to_string(), cfg.n().to_string()),
        ("k".to_string(), cfg.k().to_string()),
        ("n_t".to_string(), cfg.n_t().to_string()),
        ("fingerprint".to_string(), cfg.fingerprint()),
    ]))
}

#[pyfunction]
#[pyo3(signature = (snr_db, power=1.0))]
fn snr_db_to_noise_var(snr_db: f64, power: f64) -> f64 {
    noise_var(snr_db, power)
}

/// `count` complex gains `(re, im)` of the given fading family.
#[pyfunction]
#[pyo3(signature = (family, count, seed=0, m=1.0))]
fn sample_gains(family: &str, count: usize, seed: u64, m: f64) -> PyResult<Vec<(f64, f64)>> {
    let family: ChannelFamily = family.parse().map_err(py_err)?;
    let spec = ChannelSpec {
        nakagami_m: m,
        ..ChannelSpec::new(family, 0.0)
    };
    sample_gain_values(&spec, count, &mut rng::stream(seed, Stream::BobChannel, 0)).map_err(py_err)
}

/// Mean SSIM of two images given as flat `(C, H, W)` lists.
#[pyfunction]
fn ssim(u: Vec<f64>, v: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<f64> {
    let (c, h, w) = shape;
    if u.len() != c * h * w || v.len() != u.len() {
        return Err(PyValueError::new_err(format!("images do not have shape {shape:?}")));
    }
    let t = |x: Vec<f64>| Tensor::from_vec(x, (1, c, h, w), &Device::Cpu);
    let (u, v) = (t(u).map_err(|e| py_err(e.into()))?, t(v).map_err(|e| py_err(e.into()))?);
    let s = secure_jscc::objectives::ssim(&u, &v).map_err(py_err)?;
    s.to_scalar::<f64>().map_err(|e| py_err(e.into()))
}

/// Writes the synthetic dataset to `dir`.
#[pyfunction]
#[pyo3(signature = (dir, seed=0))]
fn synth(dir: PathBuf, seed: u64) -> PyResult<()> {
    synthetic::write_dataset(dir, seed).map_err(py_err)
}

/// Trains (or resumes) under `<out>/runs/<fingerprint>` and returns the
/// checkpoint path.
#[pyfunction]
#[pyo3(signature = (data, out, toml=None))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, toml: Option<&str>) -> PyResult<PathBuf> {
    let cfg = validate(parse_config(toml)?, ImageDims::CIFAR10, CIFAR10_CLASSES).map_err(py_err)?;
    let runs = out.join("runs");
    py.detach(|| -> secure_jscc::Result<PathBuf> {
        let set = load_dataset(&data, Split::Train, cfg.config().data.train_subset)?.images;
        train_run(&cfg, &set, Some(&runs))?;
        Ok(runs.join(cfg.fingerprint()).join("checkpoint.safetensors"))
    })
    .map_err(py_err)
}

/// Evaluates a checkpoint on the test split at one SNR pair.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, channel="rayleigh", snr_bob=20.0, snr_eve=15.0, m=3.0))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    channel: &str,
    snr_bob: f64,
    snr_eve: f64,
    m: f64,
) -> PyResult<HashMap<String, f64>> {
    let family: ChannelFamily = channel.parse().map_err(py_err)?;
    py.detach(|| -> secure_jscc::Result<HashMap<String, f64>> {
        let bundle = load_checkpoint(&checkpoint, None)?.bundle;
        let set = load_dataset(&data, Split::Test, bundle.config().config().data.eval_subset)?.images;
        let spec = |snr| ChannelSpec {
            nakagami_m: m,
            power: bundle.config().power(),
            ..ChannelSpec::new(family, snr)
        };
        let r = eval_point(&bundle, &set, &spec(snr_bob), &spec(snr_eve), 0)?;
        let mut out = HashMap::from([
            ("ssim".to_string(), r.ssim),
            ("mse".to_string(), r.mse),
            ("accuracy".to_string(), r.mean_accuracy),
            ("accuracy_se".to_string(), r.accuracy_se),
            ("samples".to_string(), r.samples as f64),
        ]);
        if let Some(c) = r.colluded_accuracy {
            out.insert("colluded_accuracy".to_string(), c);
        }
        Ok(out)
    })
    .map_err(py_err)
}

#[pymodule]
fn secure_jscc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db_to_noise_var, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gains, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

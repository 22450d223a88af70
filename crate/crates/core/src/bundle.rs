//! All trainable state of a run and its on-disk checkpoint format.
//!
//! A checkpoint is a safetensors archive. Tensor names are prefixed by role
//! (`model.encoder.*`, `model.decoder.*`, `model.adversary.<m>.*`,
//! `model.collusion.*`, `optim.<group>.{m,v}.*`); the header metadata carries
//! the validated config as TOML, the dtype, the episode and step counters and
//! the optimizer step counts.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor, Var};
use safetensors::SafeTensors;

use crate::adversary::{build_adversaries, initial_collusion_weights, Adversary};
use crate::codec::{Decoder, Encoder};
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Track};
use crate::optim::Adam;

pub const FORMAT: &str = "secure-jscc-checkpoint/1";

/// Encoder, decoder, eavesdroppers and collusion weights.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ValidatedConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub adversaries: Vec<Adversary>,
    /// Present in colluding mode: one scalar weight per eavesdropper.
    pub collusion: Option<ParamSet>,
}

impl ModelBundle {
    pub fn build(config: &ValidatedConfig, dtype: DType) -> Result<Self> {
        let collusion = if config.colluding() {
            let mut ps = ParamSet::new(dtype);
            ps.insert("weights", initial_collusion_weights(config.eavesdroppers(), dtype)?)?;
            Some(ps)
        } else {
            None
        };
        Ok(ModelBundle {
            config: config.clone(),
            encoder: Encoder::build(config, dtype)?,
            decoder: Decoder::build(config, dtype)?,
            adversaries: build_adversaries(config, dtype)?,
            collusion,
        })
    }

    pub fn config(&self) -> &ValidatedConfig {
        &self.config
    }

    /// Swaps in a config that differs only in settings the parameters do
    /// not depend on (evaluation options, for instance).
    pub fn set_config(&mut self, config: ValidatedConfig) -> Result<()> {
        let arch = |c: &ValidatedConfig| (c.dims(), c.num_classes(), c.k(), c.n_t(), c.eavesdroppers(), c.colluding());
        if arch(&config) != arch(&self.config) {
            return Err(Error::Config("replacement config changes the model architecture".into()));
        }
        self.config = config;
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.encoder.params().dtype()
    }

    pub fn collusion_weights(&self, track: Track) -> Result<Option<Tensor>> {
        self.collusion.as_ref().map(|ps| ps.get("weights", track)).transpose()
    }

    pub fn collusion_var(&self) -> Option<&Var> {
        self.collusion.as_ref().and_then(|ps| ps.var("weights").ok())
    }

    /// Role-prefixed views of every parameter set.
    pub fn groups(&self) -> Vec<(String, &ParamSet)> {
        let mut out = vec![
            ("encoder".to_string(), self.encoder.params()),
            ("decoder".to_string(), self.decoder.params()),
        ];
        for (m, a) in self.adversaries.iter().enumerate() {
            out.push((format!("adversary.{m}"), a.params()));
        }
        if let Some(c) = &self.collusion {
            out.push(("collusion".to_string(), c));
        }
        out
    }

    /// `(prefix.name, var)` for the Alice–Bob parameters.
    pub fn legit_vars(&self) -> Vec<(String, &Var)> {
        prefixed(&self.groups()[..2])
    }

    /// `(prefix.name, var)` for eavesdropper and collusion parameters.
    pub fn adversary_vars(&self) -> Vec<(String, &Var)> {
        prefixed(&self.groups()[2..])
    }

    /// Hash of encoder and decoder parameters.
    pub fn legit_digest(&self) -> Result<String> {
        Ok(format!("{}:{}", self.encoder.params().digest()?, self.decoder.params().digest()?))
    }

    /// Hash of all eavesdropper parameters and collusion weights.
    pub fn adversary_digest(&self) -> Result<String> {
        let mut parts = Vec::new();
        for (_, ps) in &self.groups()[2..] {
            parts.push(ps.digest()?);
        }
        Ok(parts.join(":"))
    }

    fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        prefixed(&self.groups())
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v.as_tensor().clone()))
            .collect()
    }

    fn assign(&self, stored: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, ps) in self.groups() {
            let head = format!("model.{prefix}.");
            let values: BTreeMap<String, Tensor> = stored
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&head).map(|n| (n.to_string(), v.clone())))
                .collect();
            ps.assign(&values)?;
        }
        Ok(())
    }
}

fn prefixed<'a>(groups: &[(String, &'a ParamSet)]) -> Vec<(String, &'a Var)> {
    groups
        .iter()
        .flat_map(|(prefix, ps)| ps.iter().map(move |(n, v)| (format!("{prefix}.{n}"), v)))
        .collect()
}

/// Optimizer state per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    /// Encoder and decoder.
    pub legit: Adam,
    pub adversaries: Vec<Adam>,
    pub collusion: Option<Adam>,
}

impl Optimizers {
    pub fn new(config: &ValidatedConfig) -> Self {
        let lr = config.config().optim.learning_rate;
        Optimizers {
            legit: Adam::new(lr),
            adversaries: (0..config.eavesdroppers()).map(|_| Adam::new(lr)).collect(),
            collusion: config.colluding().then(|| Adam::new(lr)),
        }
    }

    fn named(&self) -> Vec<(String, &Adam)> {
        let mut out = vec![("legit".to_string(), &self.legit)];
        for (m, a) in self.adversaries.iter().enumerate() {
            out.push((format!("adversary.{m}"), a));
        }
        if let Some(c) = &self.collusion {
            out.push(("collusion".to_string(), c));
        }
        out
    }
}

/// Position of a run, stored alongside the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    /// Completed episodes.
    pub episode: usize,
    /// Completed training steps.
    pub step: u64,
}

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

/// Rewrites the JSON header with sorted keys. The metadata map is a
/// `HashMap`, so without this two saves of the same state differ in bytes.
fn sorted_header(mut bytes: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let n = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or("truncated header")?;
    let header = bytes.get(8..8 + n).ok_or("truncated header")?;
    // serde_json's default map is ordered by key
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|e| e.to_string())?;
    let mut sorted = serde_json::to_vec(&value).map_err(|e| e.to_string())?;
    if sorted.len() > n {
        return Err("sorted header grew".into());
    }
    sorted.resize(n, b' ');
    bytes[8..8 + n].copy_from_slice(&sorted);
    Ok(bytes)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, optim: &Optimizers, progress: Progress) -> Result<()> {
    let mut tensors = bundle.named_tensors();
    let mut meta = HashMap::new();
    for (group, adam) in optim.named() {
        for (k, t) in adam.state_tensors() {
            tensors.insert(format!("optim.{group}.{k}"), t);
        }
        meta.insert(format!("optim.{group}.steps"), adam.steps().to_string());
    }
    meta.insert("format".into(), FORMAT.into());
    meta.insert("config".into(), bundle.config().to_toml_string()?);
    meta.insert("dtype".into(), dtype_name(bundle.dtype()).into());
    meta.insert("episode".into(), progress.episode.to_string());
    meta.insert("step".into(), progress.step.to_string());

    let bytes = safetensors::tensor::serialize(tensors.iter(), Some(meta)).map_err(|e| ckpt_err(path, e))?;
    let bytes = sorted_header(bytes).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A checkpoint read back from disk.
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub optimizers: Optimizers,
    pub progress: Progress,
}

/// Reads a checkpoint. When `expected` is given the stored config must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ValidatedConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| ckpt_err(path, format!("missing `{k}`")));
    if field("format")? != FORMAT {
        return Err(ckpt_err(path, format!("unsupported format `{}`", field("format")?)));
    }
    let config = ValidatedConfig::from_toml_str(&field("config")?).map_err(|e| ckpt_err(path, e))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(ckpt_err(
                path,
                format!(
                    "config mismatch: checkpoint {} vs requested {}",
                    config.fingerprint(),
                    exp.fingerprint()
                ),
            ));
        }
    }
    let dtype = match field("dtype")?.as_str() {
        "f64" => DType::F64,
        _ => DType::F32,
    };
    let parse_num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| ckpt_err(path, format!("bad `{k}`"))) };

    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, view.load(&Device::Cpu)?);
    }

    let bundle = ModelBundle::build(&config, dtype)?;
    bundle.assign(&tensors).map_err(|e| ckpt_err(path, e))?;

    let lr = config.config().optim.learning_rate;
    let group_state = |group: &str| -> Result<Adam> {
        let head = format!("optim.{group}.");
        let state: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|n| (n.to_string(), v.clone())))
            .collect();
        Adam::restore(lr, parse_num(&format!("optim.{group}.steps"))?, &state)
    };
    let optimizers = Optimizers {
        legit: group_state("legit")?,
        adversaries: (0..config.eavesdroppers())
            .map(|m| group_state(&format!("adversary.{m}")))
            .collect::<Result<_>>()?,
        collusion: if config.colluding() {
            Some(group_state("collusion")?)
        } else {
            None
        },
    };
    let progress = Progress {
        episode: parse_num("episode")? as usize,
        step: parse_num("step")?,
    };
    Ok(Checkpoint {
        bundle,
        optimizers,
        progress,
    })
}

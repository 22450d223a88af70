//! Alternating minimax training: each step updates the encoder/decoder pair
//! against frozen eavesdroppers, then the eavesdroppers (and collusion
//! weights) against a frozen encoder.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adversary::{accuracy, collude_aggregate, predict_logits, AdversaryLogits};
use crate::bundle::{load_checkpoint, save_checkpoint, ModelBundle, Optimizers, Progress};
use crate::channel::{transmit, Codeword};
use crate::config::{ChannelSpec, ValidatedConfig};
use crate::data::{batch_iterator, BatchPlan, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::Track;
use crate::objectives::{adversary_loss, legit_loss, LossReport};
use crate::rng::{self, Stream};

/// Largest tolerated relative deviation of a transmitted codeword's power.
pub const POWER_TOLERANCE: f64 = 1e-3;

/// One JSON line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub episode: usize,
    pub legit: LossReport,
    /// Each eavesdropper's own cross-entropy against the truth.
    pub adversary_ce: Vec<f64>,
    /// Cross-entropy of the colluded posterior, when collusion is trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colluded_ce: Option<f64>,
    /// Batch accuracy of each eavesdropper during its update.
    pub adversary_accuracy: Vec<f64>,
    /// Largest relative power deviation among the step's codewords.
    pub power_deviation: f64,
}

/// Channels seen during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainChannels {
    pub bob: ChannelSpec,
    pub eve: ChannelSpec,
}

impl TrainChannels {
    pub fn from_config(cfg: &ValidatedConfig) -> Self {
        TrainChannels {
            bob: cfg.bob_train_channel(),
            eve: cfg.eve_train_channel(),
        }
    }
}

pub struct TrainState {
    pub bundle: ModelBundle,
    pub optimizers: Optimizers,
    /// Completed episodes.
    pub episode: usize,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub channels: TrainChannels,
}

impl TrainState {
    pub fn new(cfg: &ValidatedConfig, dtype: DType) -> Result<Self> {
        Ok(TrainState {
            bundle: ModelBundle::build(cfg, dtype)?,
            optimizers: Optimizers::new(cfg),
            episode: 0,
            step: 0,
            history: Vec::new(),
            channels: TrainChannels::from_config(cfg),
        })
    }

    pub fn config(&self) -> &ValidatedConfig {
        self.bundle.config()
    }

    pub fn progress(&self) -> Progress {
        Progress {
            episode: self.episode,
            step: self.step,
        }
    }
}

/// Scalars produced by [`legit_step`].
#[derive(Clone, Debug)]
pub struct LegitOutcome {
    pub report: LossReport,
    pub power_deviation: f64,
}

/// Scalars produced by [`adversary_step`].
#[derive(Clone, Debug)]
pub struct AdversaryOutcome {
    pub adversary_ce: Vec<f64>,
    pub colluded_ce: Option<f64>,
    pub adversary_accuracy: Vec<f64>,
    pub power_deviation: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(value: f64, what: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

fn audit_power(x: &Codeword, power: f64, step: u64) -> Result<f64> {
    let deviation = x.power_deviation(power)?;
    if !(deviation <= POWER_TOLERANCE) {
        return Err(Error::PowerConstraint { step, deviation });
    }
    Ok(deviation)
}

/// Whether collusion weights are trained: a single eavesdropper has nobody
/// to collude with, so its ensemble is the identity.
fn trains_collusion(cfg: &ValidatedConfig) -> bool {
    cfg.colluding() && cfg.eavesdroppers() >= 2
}

/// Channel realisations are indexed by step and phase so that a resumed run
/// sees the same draws as an uninterrupted one.
fn channel_rng(cfg: &ValidatedConfig, purpose: Stream, step: u64, phase: u64) -> rng::Rng {
    rng::stream(cfg.config().seed, purpose, 2 * step + phase)
}

fn eve_logits(
    state: &TrainState,
    x: &Codeword,
    phase: u64,
    track: Track,
) -> Result<Vec<AdversaryLogits>> {
    let cfg = state.config();
    state
        .bundle
        .adversaries
        .iter()
        .enumerate()
        .map(|(m, adv)| {
            let mut rng = channel_rng(cfg, Stream::EveChannel(m), state.step, phase);
            let z = transmit(x, &state.channels.eve, &mut rng)?;
            adv.forward(&z, track)
        })
        .collect()
}

/// One update of the encoder and decoder with every eavesdropper frozen.
pub fn legit_step(state: &mut TrainState, batch: &ImageBatch) -> Result<LegitOutcome> {
    let cfg = state.config().clone();
    let step = state.step;
    let dtype = state.bundle.dtype();
    let u = batch.to_tensor(dtype, &Device::Cpu)?;
    let one_hot = batch.one_hot(dtype, &Device::Cpu)?;

    let x = state.bundle.encoder.encode_tensor(&u, Track::Grad)?;
    let power_deviation = audit_power(&x, cfg.power(), step)?;

    let mut rng = channel_rng(&cfg, Stream::BobChannel, step, 0);
    let y = transmit(&x, &state.channels.bob, &mut rng)?;
    let u_hat = state.bundle.decoder.forward(&y, Track::Grad)?;

    // With no leakage weight the eavesdropper branch must not reach the encoder.
    let weights = cfg.weights();
    let x_eve = if weights.iter().all(|w| *w == 0.0) {
        x.detach()
    } else {
        x.clone()
    };
    let logits = eve_logits(state, &x_eve, 0, Track::Frozen)?;
    let alpha = cfg.config().secrecy.alpha;
    let use_alc = cfg.config().secrecy.use_alc;
    let loss = match state.bundle.collusion_weights(Track::Frozen)? {
        Some(cw) if cfg.colluding() => {
            let colluded = collude_aggregate(&logits, &cw)?;
            let w = weights.iter().sum::<f64>() / weights.len() as f64;
            legit_loss(&u, &u_hat, &[colluded], &one_hot, &[w], alpha, use_alc)?
        }
        _ => legit_loss(&u, &u_hat, &logits, &one_hot, weights, alpha, use_alc)?,
    };
    finite(scalar(&loss.loss)?, "legitimate loss", step)?;

    let grads = loss.loss.backward()?;
    state.optimizers.legit.step(&state.bundle.legit_vars(), &grads)?;
    Ok(LegitOutcome {
        report: loss.report,
        power_deviation,
    })
}

/// One update of every eavesdropper, and of the collusion weights when
/// colluding, with the encoder frozen.
pub fn adversary_step(state: &mut TrainState, batch: &ImageBatch) -> Result<AdversaryOutcome> {
    let cfg = state.config().clone();
    let step = state.step;
    let dtype = state.bundle.dtype();
    let u = batch.to_tensor(dtype, &Device::Cpu)?;
    let one_hot = batch.one_hot(dtype, &Device::Cpu)?;

    let x = state.bundle.encoder.encode_tensor(&u, Track::Frozen)?;
    let power_deviation = audit_power(&x, cfg.power(), step)?;
    let logits = eve_logits(state, &x, 1, Track::Grad)?;

    let mut adversary_ce = Vec::with_capacity(logits.len());
    let mut adversary_accuracy = Vec::with_capacity(logits.len());
    let mut total: Option<Tensor> = None;
    for l in &logits {
        let ce = adversary_loss(l, &one_hot)?;
        adversary_ce.push(finite(scalar(&ce)?, "adversary loss", step)?);
        adversary_accuracy.push(accuracy(&predict_logits(l)?, batch.labels()));
        total = Some(match total {
            Some(t) => (t + ce)?,
            None => ce,
        });
    }
    let mut colluded_ce = None;
    if trains_collusion(&cfg) {
        let cw = state
            .bundle
            .collusion_weights(Track::Grad)?
            .expect("colluding bundle carries collusion weights");
        let ce = adversary_loss(&collude_aggregate(&logits, &cw)?, &one_hot)?;
        colluded_ce = Some(finite(scalar(&ce)?, "colluded adversary loss", step)?);
        total = Some((total.expect("at least one eavesdropper") + ce)?);
    }
    let grads = total.expect("at least one eavesdropper").backward()?;

    for (m, adv) in state.bundle.adversaries.iter().enumerate() {
        let vars: Vec<_> = adv.params().iter().map(|(n, v)| (n.clone(), v)).collect();
        state.optimizers.adversaries[m].step(&vars, &grads)?;
    }
    if trains_collusion(&cfg) {
        if let (Some(opt), Some(var)) = (state.optimizers.collusion.as_mut(), state.bundle.collusion_var()) {
            opt.step(&[("weights".to_string(), var)], &grads)?;
        }
    }
    Ok(AdversaryOutcome {
        adversary_ce,
        colluded_ce,
        adversary_accuracy,
        power_deviation,
    })
}

/// Legitimate update followed by adversarial update on the same batch.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch) -> Result<StepRecord> {
    let legit = legit_step(state, batch)?;
    let adv = adversary_step(state, batch)?;
    let record = StepRecord {
        step: state.step,
        episode: state.episode,
        legit: legit.report,
        adversary_ce: adv.adversary_ce,
        colluded_ce: adv.colluded_ce,
        adversary_accuracy: adv.adversary_accuracy,
        power_deviation: legit.power_deviation.max(adv.power_deviation),
    };
    state.step += 1;
    state.history.push(record.clone());
    Ok(record)
}

/// Runs one episode (a pass over `data` in a seeded order).
pub fn train_episode(state: &mut TrainState, data: &ImageBatch) -> Result<Vec<StepRecord>> {
    let cfg = state.config().clone();
    let batch_size = cfg.config().optim.batch_size.min(data.len());
    let plan = BatchPlan::training(batch_size, cfg.config().seed, state.episode as u64);
    let mut records = Vec::with_capacity(plan.num_batches(data.len()));
    for batch in batch_iterator(data, plan) {
        records.push(train_step(state, &batch)?);
    }
    state.episode += 1;
    Ok(records)
}

/// Where a run keeps its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    /// Most recent checkpoint.
    pub fn latest(&self) -> PathBuf {
        self.root.join("checkpoint.safetensors")
    }

    pub fn episode_checkpoint(&self, episode: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("episode-{episode:04}.safetensors"))
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
}

/// Reads a JSON-lines history file.
pub fn read_history(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_history(path: &Path, records: &[StepRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_history(path: &Path, records: &[StepRecord]) -> Result<()> {
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn checkpoint(state: &TrainState, dir: &RunDir) -> Result<()> {
    save_checkpoint(&dir.latest(), &state.bundle, &state.optimizers, state.progress())?;
    std::fs::copy(dir.latest(), dir.episode_checkpoint(state.episode))
        .map_err(|e| Error::io(dir.episode_checkpoint(state.episode), e))?;
    Ok(())
}

/// Starts a run in `dir`, or resumes it when `dir` already holds a
/// checkpoint for the same configuration.
pub fn open_run(cfg: &ValidatedConfig, dir: &RunDir, dtype: DType) -> Result<TrainState> {
    std::fs::create_dir_all(dir.root().join("checkpoints")).map_err(|e| Error::io(dir.root(), e))?;
    let snapshot = cfg.to_toml_string()?;
    std::fs::write(dir.config_snapshot(), &snapshot).map_err(|e| Error::io(dir.config_snapshot(), e))?;
    if dir.latest().exists() {
        let ck = load_checkpoint(&dir.latest(), Some(cfg))?;
        let history = if dir.history().exists() {
            read_history(&dir.history())?
                .into_iter()
                .filter(|r| r.step < ck.progress.step)
                .collect()
        } else {
            Vec::new()
        };
        write_history(&dir.history(), &history)?;
        let state = TrainState {
            bundle: ck.bundle,
            optimizers: ck.optimizers,
            episode: ck.progress.episode,
            step: ck.progress.step,
            history,
            channels: TrainChannels::from_config(cfg),
        };
        if state.bundle.dtype() != dtype {
            log::warn!("resuming in the checkpoint's dtype {:?}", state.bundle.dtype());
        }
        Ok(state)
    } else {
        write_history(&dir.history(), &[])?;
        TrainState::new(cfg, dtype)
    }
}

/// Trains for the configured number of episodes, persisting history and
/// checkpoints under `dir` when given.
pub fn train(state: &mut TrainState, data: &ImageBatch, dir: Option<&RunDir>) -> Result<()> {
    let cfg = state.config().clone();
    let episodes = cfg.config().optim.episodes;
    let every = cfg.config().checkpoint_every;
    if data.len() < 1 {
        return Err(Error::Data("training set is empty".into()));
    }
    while state.episode < episodes {
        let started = std::time::Instant::now();
        let records = train_episode(state, data)?;
        if let Some(last) = records.last() {
            let mean_acc: f64 = records
                .iter()
                .map(|r| r.adversary_accuracy.iter().sum::<f64>() / r.adversary_accuracy.len() as f64)
                .sum::<f64>()
                / records.len() as f64;
            log::info!(
                "episode {}/{} step {} loss {:.4} ssim {:.4} eve acc {:.3} ({:.1}s)",
                state.episode,
                episodes,
                state.step,
                last.legit.total,
                last.legit.ssim,
                mean_acc,
                started.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = dir {
            append_history(&dir.history(), &records)?;
            if state.episode == episodes || (every > 0 && state.episode % every == 0) {
                checkpoint(state, dir)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate, ImageDims, TrainingConfig};
    use crate::data::synthetic;

    fn tiny(m: usize, colluding: bool) -> ValidatedConfig {
        let mut c = TrainingConfig::default();
        c.secrecy.eavesdroppers = m;
        c.secrecy.colluding = colluding;
        c.optim.batch_size = 4;
        c.optim.episodes = 1;
        validate(c, ImageDims::CIFAR10, 10).unwrap()
    }

    fn images(n: usize) -> ImageBatch {
        synthetic::generate(n, &mut rng::stream(3, Stream::Synthetic, 0)).unwrap()
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let mut s = TrainState::new(&tiny(2, true), DType::F32).unwrap();
        let b = images(4);
        let (l0, a0) = (s.bundle.legit_digest().unwrap(), s.bundle.adversary_digest().unwrap());
        legit_step(&mut s, &b).unwrap();
        let (l1, a1) = (s.bundle.legit_digest().unwrap(), s.bundle.adversary_digest().unwrap());
        assert_ne!(l0, l1);
        assert_eq!(a0, a1);
        adversary_step(&mut s, &b).unwrap();
        assert_eq!(l1, s.bundle.legit_digest().unwrap());
        assert_ne!(a1, s.bundle.adversary_digest().unwrap());
    }

    #[test]
    fn history_grows_per_step() {
        let mut s = TrainState::new(&tiny(1, false), DType::F32).unwrap();
        train(&mut s, &images(8), None).unwrap();
        assert_eq!(s.history.len(), 2);
        assert_eq!(s.episode, 1);
        assert!(s.history.iter().all(|r| r.power_deviation < POWER_TOLERANCE));
    }
}

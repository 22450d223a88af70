//! Evaluation passes and the experiment suites built on them.

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::adversary::{accuracy, collude_aggregate, predict_logits};
use crate::bundle::ModelBundle;
use crate::channel::transmit;
use crate::config::{ChannelFamily, ChannelSpec, TrainingConfig, ValidatedConfig, Weights};
use crate::data::{batch_iterator, BatchPlan, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::Track;
use crate::objectives::{mse_per_image, ssim_per_image};
use crate::rng::{self, Stream};
use crate::trainer::{open_run, train, RunDir};

/// Metrics of one full pass over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub bob: ChannelSpec,
    pub eve: ChannelSpec,
    pub samples: usize,
    pub ssim: f64,
    /// Standard error of the per-image SSIM mean.
    pub ssim_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    /// Accuracy of each eavesdropper on its own.
    pub accuracy: Vec<f64>,
    /// Mean of `accuracy` over eavesdroppers.
    pub mean_accuracy: f64,
    /// Binomial standard error of `mean_accuracy`.
    pub accuracy_se: f64,
    /// Accuracy of the colluded logits, for colluding bundles.
    pub colluded_accuracy: Option<f64>,
    pub colluded_se: Option<f64>,
    pub fingerprint: String,
}

/// `sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn check_compatible(bundle: &ModelBundle, data: &ImageBatch) -> Result<()> {
    let cfg = bundle.config();
    if data.dims() != cfg.dims() || data.num_classes() != cfg.num_classes() {
        return Err(Error::Config(format!(
            "bundle expects {:?} images with {} classes, dataset has {:?} with {}",
            cfg.dims(),
            cfg.num_classes(),
            data.dims(),
            data.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    Ok(())
}

/// One pass over `data`: every image is encoded once, sent to Bob over
/// `bob` and to each eavesdropper over an independent draw of `eve`.
/// `stream` selects the channel randomness so distinct points do not reuse
/// realisations.
pub fn eval_point(
    bundle: &ModelBundle,
    data: &ImageBatch,
    bob: &ChannelSpec,
    eve: &ChannelSpec,
    stream: u64,
) -> Result<EvalMetrics> {
    check_compatible(bundle, data)?;
    bob.validate()?;
    eve.validate()?;
    let cfg = bundle.config();
    let seed = cfg.config().seed;
    let m = cfg.eavesdroppers();
    let dtype = bundle.dtype();
    let mut bob_rng = rng::stream(seed, Stream::EvalBob, stream);
    let mut eve_rngs: Vec<_> = (0..m).map(|i| rng::stream(seed, Stream::EvalEve(i), stream)).collect();
    let collusion = bundle.collusion_weights(Track::Frozen)?;

    let mut ssims = Vec::with_capacity(data.len());
    let mut mses = Vec::with_capacity(data.len());
    let mut predictions = vec![Vec::with_capacity(data.len()); m];
    let mut colluded = Vec::new();
    let plan = BatchPlan::evaluation(cfg.config().optim.batch_size);
    for batch in batch_iterator(data, plan) {
        let u = batch.to_tensor(dtype, &Device::Cpu)?;
        let x = bundle.encoder.encode_tensor(&u, Track::Frozen)?;
        let y = transmit(&x, bob, &mut bob_rng)?;
        let u_hat = bundle.decoder.forward(&y, Track::Frozen)?;
        ssims.extend(ssim_per_image(&u, &u_hat)?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        mses.extend(mse_per_image(&u, &u_hat)?.to_dtype(DType::F64)?.to_vec1::<f64>()?);

        let mut logits = Vec::with_capacity(m);
        for (i, adv) in bundle.adversaries.iter().enumerate() {
            let z = transmit(&x, eve, &mut eve_rngs[i])?;
            let l = adv.forward(&z, Track::Frozen)?;
            predictions[i].extend(predict_logits(&l)?);
            logits.push(l);
        }
        if let Some(w) = &collusion {
            colluded.extend(predict_logits(&collude_aggregate(&logits, w)?)?);
        }
    }

    let labels = data.labels();
    let n = labels.len();
    let acc: Vec<f64> = predictions.iter().map(|p| accuracy(p, labels)).collect();
    let mean_accuracy = acc.iter().sum::<f64>() / m as f64;
    let (ssim, ssim_se) = mean_and_se(&ssims);
    let (mse, mse_se) = mean_and_se(&mses);
    let colluded_accuracy = collusion.as_ref().map(|_| accuracy(&colluded, labels));
    Ok(EvalMetrics {
        bob: *bob,
        eve: *eve,
        samples: n,
        ssim,
        ssim_se,
        mse,
        mse_se,
        accuracy: acc,
        mean_accuracy,
        accuracy_se: binomial_se(mean_accuracy, n),
        colluded_accuracy,
        colluded_se: colluded_accuracy.map(|p| binomial_se(p, n)),
        fingerprint: cfg.fingerprint(),
    })
}

/// Eavesdropper accuracy used in trend statistics: the colluded accuracy
/// when the bundle colludes, otherwise the mean solo accuracy.
pub fn headline_accuracy(m: &EvalMetrics) -> f64 {
    m.colluded_accuracy.unwrap_or(m.mean_accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma_b_db: f64,
    pub gamma_e_db: f64,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub family: ChannelFamily,
    pub points: Vec<SweepPoint>,
    pub fingerprint: String,
}

impl SweepResult {
    pub fn gamma_e(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.gamma_e_db).collect()
    }

    pub fn accuracy(&self) -> Vec<f64> {
        self.points.iter().map(|p| headline_accuracy(&p.metrics)).collect()
    }

    pub fn ssim(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.metrics.ssim).collect()
    }

    /// Spearman correlation of accuracy against the eavesdropper SNR.
    pub fn accuracy_trend(&self) -> f64 {
        spearman(&self.gamma_e(), &self.accuracy())
    }

    /// Spread of accuracy over the sweep (max minus min).
    pub fn accuracy_rise(&self) -> f64 {
        let acc = self.accuracy();
        let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Evaluates `bundle` over `family` at every Bob SNR in `gamma_b_db`, the
/// eavesdroppers sitting `eve_offset_db` below.
pub fn snr_sweep(
    bundle: &ModelBundle,
    data: &ImageBatch,
    family: ChannelFamily,
    gamma_b_db: &[f64],
) -> Result<SweepResult> {
    if gamma_b_db.is_empty() {
        return Err(Error::Config("SNR sweep needs at least one point".into()));
    }
    let cfg = bundle.config();
    let offset = cfg.config().eval.eve_offset_db;
    let mut points = Vec::with_capacity(gamma_b_db.len());
    for (i, &gb) in gamma_b_db.iter().enumerate() {
        let bob = cfg.eval_channel(family, gb);
        let eve = cfg.eval_channel(family, gb - offset);
        log::info!("{family} sweep: gamma_b {gb} dB, gamma_e {} dB", gb - offset);
        let metrics = eval_point(bundle, data, &bob, &eve, i as u64)?;
        points.push(SweepPoint {
            gamma_b_db: gb,
            gamma_e_db: gb - offset,
            metrics,
        });
    }
    Ok(SweepResult {
        family,
        points,
        fingerprint: cfg.fingerprint(),
    })
}

/// Trains `cfg` on `train`, reusing `root/<fingerprint>` as run directory so
/// a finished run is loaded instead of retrained and an interrupted one
/// resumes.
pub fn train_run(cfg: &ValidatedConfig, train_set: &ImageBatch, root: Option<&Path>) -> Result<ModelBundle> {
    match root {
        Some(root) => {
            let dir = RunDir::new(root.join(cfg.fingerprint()));
            let mut state = open_run(cfg, &dir, DType::F32)?;
            train(&mut state, train_set, Some(&dir))?;
            Ok(state.bundle)
        }
        None => {
            let mut state = crate::trainer::TrainState::new(cfg, DType::F32)?;
            train(&mut state, train_set, None)?;
            Ok(state.bundle)
        }
    }
}

/// Evaluation at the training operating point, over the evaluation family.
pub fn eval_at_training_point(bundle: &ModelBundle, data: &ImageBatch) -> Result<EvalMetrics> {
    let cfg = bundle.config();
    let link = &cfg.config().link;
    let family = cfg.config().eval.channel;
    eval_point(
        bundle,
        data,
        &cfg.eval_channel(family, link.snr_train_bob_db),
        &cfg.eval_channel(family, link.snr_train_eve_db),
        0,
    )
}

/// Which matched variants the ablation trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub eavesdroppers: Vec<usize>,
    pub colluding: Vec<bool>,
    /// Leakage weights; the first is the secure setting, `0` disables it.
    pub w: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            eavesdroppers: vec![1, 2, 3],
            colluding: vec![false, true],
            w: vec![5.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub eavesdroppers: usize,
    pub colluding: bool,
    pub w: f64,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn find(&self, eavesdroppers: usize, colluding: bool, w: f64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.eavesdroppers == eavesdroppers && r.colluding == colluding && r.w == w)
    }
}

/// Applies one ablation cell to a base configuration; all seeds are kept.
pub fn ablation_variant(base: &TrainingConfig, eavesdroppers: usize, colluding: bool, w: f64) -> TrainingConfig {
    let mut c = base.clone();
    c.secrecy.eavesdroppers = eavesdroppers;
    c.secrecy.colluding = colluding;
    c.secrecy.w = Weights::Shared(w);
    c
}

/// Trains and evaluates every cell of `grid`. M=1 skips the colluding
/// variant, which is identical to the non-colluding one.
pub fn ablation_suite(
    base: &ValidatedConfig,
    train_set: &ImageBatch,
    eval_set: &ImageBatch,
    grid: &AblationGrid,
    runs_root: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &m in &grid.eavesdroppers {
        for &colluding in &grid.colluding {
            if colluding && m == 1 && grid.colluding.contains(&false) {
                continue;
            }
            for &w in &grid.w {
                let cfg = base.with_config(ablation_variant(base.config(), m, colluding, w))?;
                log::info!("ablation: M={m} colluding={colluding} w={w}");
                let bundle = train_run(&cfg, train_set, runs_root)?;
                rows.push(AblationRow {
                    eavesdroppers: m,
                    colluding,
                    w,
                    metrics: eval_at_training_point(&bundle, eval_set)?,
                });
            }
        }
    }
    Ok(AblationReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub alpha: f64,
    pub w: f64,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceReport {
    pub cells: Vec<SurfaceCell>,
}

/// One trained model per `(alpha, w)` cell, evaluated at the training point.
pub fn tradeoff_surface(
    base: &ValidatedConfig,
    train_set: &ImageBatch,
    eval_set: &ImageBatch,
    alpha_grid: &[f64],
    w_grid: &[f64],
    runs_root: Option<&Path>,
) -> Result<SurfaceReport> {
    if alpha_grid.is_empty() || w_grid.is_empty() {
        return Err(Error::Config("trade-off grids must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for &alpha in alpha_grid {
        for &w in w_grid {
            let mut c = base.config().clone();
            c.secrecy.alpha = alpha;
            c.secrecy.w = Weights::Shared(w);
            let cfg = base.with_config(c)?;
            log::info!("surface: alpha={alpha} w={w}");
            let bundle = train_run(&cfg, train_set, runs_root)?;
            cells.push(SurfaceCell {
                alpha,
                w,
                metrics: eval_at_training_point(&bundle, eval_set)?,
            });
        }
    }
    Ok(SurfaceReport { cells })
}

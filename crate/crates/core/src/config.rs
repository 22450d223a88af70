//! Hyperparameters, channel descriptions and their validation.
//!
//! A [`TrainingConfig`] is what users write (TOML, one section per concern).
//! [`validate`] checks it against the image geometry and fills in the derived
//! channel dimension `k`, producing an immutable [`ValidatedConfig`] that every
//! other module consumes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A positive rational `num/den`, written as `"1/3"` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse ratio `{s}` (expected `num/den`)"));
        let (num, den) = match s.split_once('/') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (s.trim(), "1"),
        };
        let num = num.parse().map_err(|_| bad())?;
        let den = den.parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        Ok(Ratio { num, den })
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelFamily {
    Awgn,
    Rayleigh,
    Nakagami,
}

impl ChannelFamily {
    pub const ALL: [ChannelFamily; 3] = [
        ChannelFamily::Awgn,
        ChannelFamily::Rayleigh,
        ChannelFamily::Nakagami,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ChannelFamily::Awgn => "awgn",
            ChannelFamily::Rayleigh => "rayleigh",
            ChannelFamily::Nakagami => "nakagami",
        }
    }
}

impl fmt::Display for ChannelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelFamily::Awgn),
            "rayleigh" => Ok(ChannelFamily::Rayleigh),
            "nakagami" | "nakagami-m" => Ok(ChannelFamily::Nakagami),
            other => Err(Error::Config(format!("unknown channel family `{other}`"))),
        }
    }
}

/// One receiver's link: fading family, average SNR and transmit power.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub family: ChannelFamily,
    pub snr_db: f64,
    /// Nakagami shape `m`; ignored by the other families.
    pub nakagami_m: f64,
    pub power: f64,
}

impl ChannelSpec {
    pub fn new(family: ChannelFamily, snr_db: f64) -> Self {
        ChannelSpec {
            family,
            snr_db,
            nakagami_m: 1.0,
            power: 1.0,
        }
    }

    pub fn awgn(snr_db: f64) -> Self {
        Self::new(ChannelFamily::Awgn, snr_db)
    }

    pub fn rayleigh(snr_db: f64) -> Self {
        Self::new(ChannelFamily::Rayleigh, snr_db)
    }

    pub fn nakagami(snr_db: f64, m: f64) -> Self {
        ChannelSpec {
            nakagami_m: m,
            ..Self::new(ChannelFamily::Nakagami, snr_db)
        }
    }

    pub fn with_power(self, power: f64) -> Self {
        ChannelSpec { power, ..self }
    }

    pub fn with_snr(self, snr_db: f64) -> Self {
        ChannelSpec { snr_db, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Config(format!("SNR must be finite, got {}", self.snr_db)));
        }
        if !(self.power.is_finite() && self.power > 0.0) {
            return Err(Error::Config(format!("power must be positive, got {}", self.power)));
        }
        if self.family == ChannelFamily::Nakagami && !(self.nakagami_m >= 0.5) {
            return Err(Error::Config(format!(
                "Nakagami m must be at least 0.5, got {}",
                self.nakagami_m
            )));
        }
        Ok(())
    }
}

/// Leakage weights `w_m`: a single shared value or one per eavesdropper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Shared(f64),
    PerAdversary(Vec<f64>),
}

impl Weights {
    fn resolve(&self, eavesdroppers: usize) -> Result<Vec<f64>> {
        let w = match self {
            Weights::Shared(w) => vec![*w; eavesdroppers],
            Weights::PerAdversary(v) if v.len() == eavesdroppers => v.clone(),
            Weights::PerAdversary(v) => {
                return Err(Error::Config(format!(
                    "{} leakage weights given for {eavesdroppers} eavesdroppers",
                    v.len()
                )))
            }
        };
        if let Some(bad) = w.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("leakage weight must be >= 0, got {bad}")));
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecrecyConfig {
    /// Number of eavesdroppers `M`.
    pub eavesdroppers: usize,
    pub colluding: bool,
    pub w: Weights,
    /// Weight of the SSIM term in the distortion.
    pub alpha: f64,
    /// Push eavesdropper posteriors towards uniform instead of away from the truth.
    pub use_alc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Bandwidth compression ratio `k/n`.
    pub k_over_n: Ratio,
    /// Transmit antennas.
    pub n_t: usize,
    pub power: f64,
    pub snr_train_bob_db: f64,
    pub snr_train_eve_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub episodes: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Class-balanced training subset size; full split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_subset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub channel: ChannelFamily,
    pub nakagami_m: f64,
    /// Bob SNR grid for sweeps.
    pub gamma_b_db: Vec<f64>,
    /// Eve links are evaluated at `gamma_b - eve_offset_db`.
    pub eve_offset_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Checkpoint every this many episodes; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub secrecy: SecrecyConfig,
    pub link: LinkConfig,
    pub optim: OptimConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 0,
            checkpoint_every: 10,
            secrecy: SecrecyConfig {
                eavesdroppers: 1,
                colluding: false,
                w: Weights::Shared(5.0),
                alpha: 0.1,
                use_alc: true,
            },
            link: LinkConfig {
                k_over_n: Ratio::new(1, 3),
                n_t: 4,
                power: 1.0,
                snr_train_bob_db: 20.0,
                snr_train_eve_db: 15.0,
            },
            optim: OptimConfig {
                batch_size: 128,
                episodes: 200,
                learning_rate: 1e-4,
            },
            data: DataConfig::default(),
            eval: EvalConfig {
                channel: ChannelFamily::Rayleigh,
                nakagami_m: 3.0,
                gamma_b_db: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
                eve_offset_db: 5.0,
            },
        }
    }
}

pub const DESK_TRAIN_SUBSET: usize = 5000;
pub const DESK_EVAL_SUBSET: usize = 2000;
pub const DESK_EPISODES: usize = 20;

impl TrainingConfig {
    /// The reduced preset: balanced 5000/2000 subsets and 20 episodes.
    pub fn desk_scale(mut self) -> Self {
        self.data.train_subset = Some(DESK_TRAIN_SUBSET);
        self.data.eval_subset = Some(DESK_EVAL_SUBSET);
        self.optim.episodes = DESK_EPISODES;
        self.checkpoint_every = 5;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `section.key=value` override; the value is parsed as a TOML
    /// literal, falling back to a bare string.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields at least one key");
        let mut node = &mut root;
        for key in parents {
            node = node
                .get_mut(*key)
                .ok_or_else(|| Error::Config(format!("unknown config section `{key}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a config key")))?;
        // Optional keys are absent from the serialized form.
        if !table.contains_key(*last) && !matches!(*last, "train_subset" | "eval_subset") {
            return Err(Error::Config(format!("unknown config key `{path}`")));
        }
        table.insert((*last).to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}

/// Height, width and channel count of the source images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub const CIFAR10: ImageDims = ImageDims {
        height: 32,
        width: 32,
        channels: 3,
    };

    /// Source dimension `n`.
    pub fn n(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// A checked configuration with derived quantities. Immutable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawValidated", into = "RawValidated")]
pub struct ValidatedConfig {
    config: TrainingConfig,
    dims: ImageDims,
    num_classes: usize,
    n: usize,
    k: usize,
    weights: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawValidated {
    num_classes: usize,
    dims: ImageDims,
    config: TrainingConfig,
}

impl TryFrom<RawValidated> for ValidatedConfig {
    type Error = Error;

    fn try_from(raw: RawValidated) -> Result<Self> {
        validate(raw.config, raw.dims, raw.num_classes)
    }
}

impl From<ValidatedConfig> for RawValidated {
    fn from(v: ValidatedConfig) -> Self {
        RawValidated {
            num_classes: v.num_classes,
            dims: v.dims,
            config: v.config,
        }
    }
}

/// Checks `cfg` against the image geometry and derives `n`, `k` and the
/// per-eavesdropper weights.
pub fn validate(cfg: TrainingConfig, dims: ImageDims, num_classes: usize) -> Result<ValidatedConfig> {
    let bad = |msg: String| Err(Error::Config(msg));

    let s = &cfg.secrecy;
    if s.eavesdroppers < 1 {
        return bad("at least one eavesdropper is required".into());
    }
    if !(s.alpha.is_finite() && s.alpha >= 0.0) {
        return bad(format!("alpha must be >= 0, got {}", s.alpha));
    }
    let weights = s.w.resolve(s.eavesdroppers)?;

    // TOML integers are signed 64-bit
    if cfg.seed > i64::MAX as u64 {
        return bad(format!("seed must be at most {}, got {}", i64::MAX, cfg.seed));
    }

    let l = &cfg.link;
    let ratio = l.k_over_n;
    if ratio.num == 0 || ratio.num >= ratio.den {
        return bad(format!("k/n must lie strictly between 0 and 1, got {ratio}"));
    }
    if l.n_t < 1 {
        return bad("at least one transmit antenna is required".into());
    }
    ChannelSpec::rayleigh(l.snr_train_bob_db)
        .with_power(l.power)
        .validate()?;
    ChannelSpec::rayleigh(l.snr_train_eve_db).validate()?;

    let o = &cfg.optim;
    if o.batch_size < 1 || o.episodes < 1 {
        return bad("batch size and episode count must be positive".into());
    }
    if !(o.learning_rate.is_finite() && o.learning_rate > 0.0) {
        return bad(format!("learning rate must be positive, got {}", o.learning_rate));
    }
    if cfg.data.train_subset == Some(0) || cfg.data.eval_subset == Some(0) {
        return bad("subset sizes must be positive".into());
    }

    let e = &cfg.eval;
    ChannelSpec::nakagami(0.0, e.nakagami_m).validate()?;
    if e.gamma_b_db.iter().any(|g| !g.is_finite()) || !e.eve_offset_db.is_finite() {
        return bad("evaluation SNRs must be finite".into());
    }

    if num_classes < 2 {
        return bad(format!("need at least two secret classes, got {num_classes}"));
    }
    let n = dims.n();
    if n == 0 {
        return bad("image dimensions must be positive".into());
    }
    let k = (n as u128 * ratio.num as u128 / ratio.den as u128) as usize;
    if k < 1 {
        return bad(format!("k = floor({n} * {ratio}) is zero"));
    }

    Ok(ValidatedConfig {
        config: cfg,
        dims,
        num_classes,
        n,
        k,
        weights,
    })
}

impl ValidatedConfig {
    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    /// Secret alphabet size `L`.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Channel uses per image.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_t(&self) -> usize {
        self.config.link.n_t
    }

    pub fn eavesdroppers(&self) -> usize {
        self.config.secrecy.eavesdroppers
    }

    pub fn colluding(&self) -> bool {
        self.config.secrecy.colluding
    }

    /// Per-eavesdropper leakage weights, length `M`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn power(&self) -> f64 {
        self.config.link.power
    }

    pub fn bob_train_channel(&self) -> ChannelSpec {
        ChannelSpec::rayleigh(self.config.link.snr_train_bob_db).with_power(self.power())
    }

    pub fn eve_train_channel(&self) -> ChannelSpec {
        ChannelSpec::rayleigh(self.config.link.snr_train_eve_db).with_power(self.power())
    }

    /// The evaluation channel family at the given SNR.
    pub fn eval_channel(&self, family: ChannelFamily, snr_db: f64) -> ChannelSpec {
        ChannelSpec {
            family,
            snr_db,
            nakagami_m: self.config.eval.nakagami_m,
            power: self.power(),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short content hash identifying this configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Same geometry, different hyperparameters.
    pub fn with_config(&self, cfg: TrainingConfig) -> Result<Self> {
        validate(cfg, self.dims, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar(cfg: TrainingConfig) -> Result<ValidatedConfig> {
        validate(cfg, ImageDims::CIFAR10, 10)
    }

    #[test]
    fn cifar_defaults_derive_k() {
        let v = cifar(TrainingConfig::default()).unwrap();
        assert_eq!(v.n(), 3072);
        assert_eq!(v.k(), 1024);
        assert_eq!(v.num_classes(), 10);
        assert_eq!(v.weights(), &[5.0]);
    }

    #[test]
    fn documented_defaults() {
        let c = TrainingConfig::default();
        assert_eq!(c.optim.episodes, 200);
        assert_eq!(c.optim.batch_size, 128);
        assert_eq!(c.optim.learning_rate, 1e-4);
        assert_eq!(c.secrecy.alpha, 0.1);
        assert_eq!(c.secrecy.w, Weights::Shared(5.0));
        assert_eq!(c.link.n_t, 4);
        assert_eq!((c.link.snr_train_bob_db, c.link.snr_train_eve_db), (20.0, 15.0));
    }

    #[test]
    fn rejects_zero_eavesdroppers() {
        let mut c = TrainingConfig::default();
        c.secrecy.eavesdroppers = 0;
        let err = cifar(c).unwrap_err().to_string();
        assert!(err.contains("at least one eavesdropper"), "{err}");
    }

    #[test]
    fn zero_weights_are_valid() {
        let mut c = TrainingConfig::default();
        c.secrecy.w = Weights::Shared(0.0);
        c.secrecy.alpha = 0.0;
        assert!(cifar(c).is_ok());
    }

    #[test]
    fn rejects_bad_ratio_and_weights() {
        for r in ["0/3", "3/3", "4/3"] {
            let mut c = TrainingConfig::default();
            c.link.k_over_n = r.parse().unwrap();
            assert!(cifar(c).is_err(), "{r}");
        }
        let mut c = TrainingConfig::default();
        c.secrecy.w = Weights::Shared(-1.0);
        assert!(cifar(c).is_err());
        let mut c = TrainingConfig::default();
        c.secrecy.alpha = -0.1;
        assert!(cifar(c).is_err());
        let mut c = TrainingConfig::default();
        c.secrecy.eavesdroppers = 3;
        c.secrecy.w = Weights::PerAdversary(vec![1.0, 2.0]);
        assert!(cifar(c).is_err());
    }

    #[test]
    fn rejects_small_nakagami_m() {
        let mut c = TrainingConfig::default();
        c.eval.nakagami_m = 0.4;
        assert!(cifar(c).is_err());
        assert!(ChannelSpec::nakagami(10.0, 0.49).validate().is_err());
        assert!(ChannelSpec::nakagami(10.0, 0.5).validate().is_ok());
    }

    #[test]
    fn tiny_ratio_rounding_to_zero_is_rejected() {
        let mut c = TrainingConfig::default();
        c.link.k_over_n = Ratio::new(1, 10_000);
        assert!(cifar(c).is_err());
    }

    #[test]
    fn overrides() {
        let mut c = TrainingConfig::default();
        c.set_override("secrecy.w=0").unwrap();
        assert_eq!(c.secrecy.w, Weights::Shared(0.0));
        c.set_override("secrecy.w=[1.0, 2.0]").unwrap();
        assert_eq!(c.secrecy.w, Weights::PerAdversary(vec![1.0, 2.0]));
        c.set_override("link.k_over_n=1/6").unwrap();
        assert_eq!(c.link.k_over_n, Ratio::new(1, 6));
        c.set_override("eval.channel=nakagami").unwrap();
        assert_eq!(c.eval.channel, ChannelFamily::Nakagami);
        c.set_override("data.train_subset=100").unwrap();
        assert_eq!(c.data.train_subset, Some(100));
        c.set_override("seed=9").unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.set_override("secrecy.nope=1").is_err());
        assert!(c.set_override("optim.batch_size=abc").is_err());
        assert!(c.set_override("noequals").is_err());
    }

    #[test]
    fn toml_sections() {
        let text = TrainingConfig::default().to_toml_string().unwrap();
        assert!(text.contains("[secrecy]"));
        assert!(text.contains("k_over_n = \"1/3\""));
        let back = TrainingConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, TrainingConfig::default());
    }
}

//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::bundle::{load_checkpoint, ModelBundle};
use crate::config::{validate, ChannelFamily, ImageDims, TrainingConfig, ValidatedConfig};
use crate::data::{load_dataset, synthetic, ImageBatch, Split, CIFAR10_CLASSES};
use crate::error::{Error, Result};
use crate::evaluator::{ablation_suite, eval_point, snr_sweep, tradeoff_surface, AblationGrid};
use crate::report::{emit_report, regenerate, Table};
use crate::trainer::{open_run, train, RunDir};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SECURE_JSCC_OUT";
/// Environment variable naming the CIFAR-10 binary directory.
pub const DATA_ENV: &str = "CIFAR10_DIR";

#[derive(Debug, Parser)]
#[command(name = "secure-jscc", version, about = "Adversarially trained secure image transmission over fading channels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a model; artifacts go to <out>/runs/<fingerprint>.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one SNR pair.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over the configured Bob SNR grid.
    Sweep(SweepArgs),
    /// Train and evaluate matched secure/insecure and colluding/solo variants.
    Ablate(AblateArgs),
    /// Train one model per (alpha, w) cell.
    Surface(SurfaceArgs),
    /// Rebuild the plots of a report directory from its data.csv.
    Report(ReportArgs),
    /// Write a synthetic dataset in the CIFAR-10 binary layout.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set secrecy.w=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reduced preset: 5000/2000-image balanced subsets, 20 episodes.
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CIFAR-10 binary directory.
    #[arg(long, env = DATA_ENV)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output root.
    #[arg(long, env = OUT_ENV, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation channel family; the checkpoint's configured family when absent.
    #[arg(long)]
    pub channel: Option<ChannelFamily>,
    /// Nakagami shape parameter.
    #[arg(long)]
    pub m: Option<f64>,
    /// Bob SNR in dB; the training value when absent.
    #[arg(long)]
    pub snr_bob: Option<f64>,
    /// Eavesdropper SNR in dB; Bob's minus the configured offset when absent.
    #[arg(long)]
    pub snr_eve: Option<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Channel families to sweep; all three when absent.
    #[arg(long, value_delimiter = ',')]
    pub channel: Vec<ChannelFamily>,
    #[arg(long)]
    pub m: Option<f64>,
    /// Bob SNR grid in dB; the configured grid when absent.
    #[arg(long, value_delimiter = ',')]
    pub gamma_b: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3])]
    pub eavesdroppers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 0.0])]
    pub w: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.5, 1.0])]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 5.0, 10.0])]
    pub w: Vec<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report directory holding data.csv.
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Destination directory.
    pub dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<TrainingConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainingConfig::load(path)?,
        None => TrainingConfig::default(),
    };
    if args.desk_scale {
        cfg = cfg.desk_scale();
    }
    for o in &args.overrides {
        cfg.set_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(args: &DataArgs) -> Result<&Path> {
    args.data.as_deref().ok_or_else(|| {
        Error::Data(format!(
            "no dataset: pass --data or set {DATA_ENV} (`secure-jscc synth <dir>` writes a synthetic one)"
        ))
    })
}

fn load_split(args: &DataArgs, split: Split, subset: Option<usize>) -> Result<ImageBatch> {
    Ok(load_dataset(data_dir(args)?, split, subset)?.images)
}

fn validated(cfg: TrainingConfig) -> Result<ValidatedConfig> {
    validate(cfg, ImageDims::CIFAR10, CIFAR10_CLASSES)
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    Ok(load_checkpoint(path, None)?.bundle)
}

fn eval_set(bundle: &ModelBundle, data: &DataArgs) -> Result<ImageBatch> {
    load_split(data, Split::Test, bundle.config().config().data.eval_subset)
}

/// Applies a `--m` flag to the bundle's evaluation config.
fn with_nakagami(bundle: ModelBundle, m: Option<f64>) -> Result<ModelBundle> {
    let Some(m) = m else { return Ok(bundle) };
    let mut c = bundle.config().config().clone();
    c.eval.nakagami_m = m;
    let cfg = bundle.config().with_config(c)?;
    let mut rebuilt = bundle;
    rebuilt.set_config(cfg)?;
    Ok(rebuilt)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = validated(resolve_config(&a.config)?)?;
    let data = load_split(&a.data, Split::Train, cfg.config().data.train_subset)?;
    let dir = RunDir::new(a.out.out.join("runs").join(cfg.fingerprint()));
    let mut state = open_run(&cfg, &dir, DType::F32)?;
    if state.episode > 0 {
        log::info!("resuming {} at episode {}", dir.root().display(), state.episode);
    }
    train(&mut state, &data, Some(&dir))?;
    println!("{}", dir.latest().display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let bundle = with_nakagami(load_bundle(&a.checkpoint)?, a.m)?;
    let cfg = bundle.config().clone();
    let family = a.channel.unwrap_or(cfg.config().eval.channel);
    let gb = a.snr_bob.unwrap_or(cfg.config().link.snr_train_bob_db);
    let ge = a.snr_eve.unwrap_or(gb - cfg.config().eval.eve_offset_db);
    let data = eval_set(&bundle, &a.data)?;
    let m = eval_point(&bundle, &data, &cfg.eval_channel(family, gb), &cfg.eval_channel(family, ge), 0)?;
    println!(
        "{family}: ssim {:.4} ± {:.4}, mse {:.5}, eve accuracy {:.4} ± {:.4}{}",
        m.ssim,
        m.ssim_se,
        m.mse,
        m.mean_accuracy,
        m.accuracy_se,
        m.colluded_accuracy.map(|c| format!(", colluded {c:.4}")).unwrap_or_default()
    );
    let dir = emit_report(&Table::from_eval(&[m]), "eval", &a.out.out, &cfg.to_toml_string()?)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let bundle = with_nakagami(load_bundle(&a.checkpoint)?, a.m)?;
    let cfg = bundle.config().clone();
    let families = if a.channel.is_empty() {
        ChannelFamily::ALL.to_vec()
    } else {
        a.channel.clone()
    };
    let grid = if a.gamma_b.is_empty() {
        cfg.config().eval.gamma_b_db.clone()
    } else {
        a.gamma_b.clone()
    };
    let data = eval_set(&bundle, &a.data)?;
    let mut sweeps = Vec::new();
    for f in families {
        let s = snr_sweep(&bundle, &data, f, &grid)?;
        println!("{f}: accuracy trend rho {:.3}, spread {:.4}", s.accuracy_trend(), s.accuracy_rise());
        sweeps.push(s);
    }
    let dir = emit_report(&Table::from_sweeps(&sweeps), "sweep", &a.out.out, &cfg.to_toml_string()?)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = validated(resolve_config(&a.config)?)?;
    let train_set = load_split(&a.data, Split::Train, cfg.config().data.train_subset)?;
    let eval = load_split(&a.data, Split::Test, cfg.config().data.eval_subset)?;
    let grid = AblationGrid {
        eavesdroppers: a.eavesdroppers.clone(),
        w: a.w.clone(),
        ..AblationGrid::default()
    };
    let runs = a.out.out.join("runs");
    let report = ablation_suite(&cfg, &train_set, &eval, &grid, Some(&runs))?;
    let dir = emit_report(&Table::from_ablation(&report), "ablate", &a.out.out, &cfg.to_toml_string()?)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_surface(a: &SurfaceArgs) -> Result<()> {
    let cfg = validated(resolve_config(&a.config)?)?;
    let train_set = load_split(&a.data, Split::Train, cfg.config().data.train_subset)?;
    let eval = load_split(&a.data, Split::Test, cfg.config().data.eval_subset)?;
    let runs = a.out.out.join("runs");
    let report = tradeoff_surface(&cfg, &train_set, &eval, &a.alpha, &a.w, Some(&runs))?;
    let dir = emit_report(&Table::from_surface(&report), "surface", &a.out.out, &cfg.to_toml_string()?)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let table = regenerate(&a.dir)?;
    println!("{} rows, plots rewritten in {}", table.len(), a.dir.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    synthetic::write_dataset(&a.dir, a.seed)?;
    println!("{}", a.dir.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Surface(a) => cmd_surface(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

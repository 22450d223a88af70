//! Adversarially trained joint source-channel coding for image transmission
//! over multi-antenna fading channels, with one or more (possibly colluding)
//! eavesdroppers trying to infer a private image attribute.

pub mod adversary;
pub mod bundle;
pub mod channel;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod trainer;

pub use bundle::{load_checkpoint, save_checkpoint, Checkpoint, ModelBundle, Optimizers, Progress};
pub use config::{validate, ChannelFamily, ChannelSpec, ImageDims, TrainingConfig, ValidatedConfig};
pub use error::{Error, Result};

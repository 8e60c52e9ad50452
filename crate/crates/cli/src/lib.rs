//! Configuration, checkpoints and the train/eval/predict drivers behind the
//! `genconvit` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};

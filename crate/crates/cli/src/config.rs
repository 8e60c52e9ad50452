//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use genconvit_core::datapipe::{AugmentConfig, SplitRatios};
use genconvit_core::{ModelConfig, Preset};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_a: usize,
    pub batch_b: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_a: 32,
            batch_b: 16,
            epochs: 30,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Frames drawn per training video per epoch.
    pub frames_train: usize,
    /// Frames per video at evaluation and prediction.
    pub frames_eval: usize,
    pub split: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            frames_train: 30,
            frames_eval: 15,
            split: SplitRatios::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics_dir: PathBuf::from("metrics"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preset: Preset::Tiny,
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            io: IoConfig::default(),
        }
    }
}

/// The file form: everything optional. An explicit `[model]` table wins
/// over `preset`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    preset: Option<Preset>,
    model: Option<ModelConfig>,
    train: TrainConfig,
    data: DataConfig,
    io: IoConfig,
}

/// Values given on the command line; `None` leaves the lower layer alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_a: Option<usize>,
    pub batch_b: Option<usize>,
    pub epochs: Option<usize>,
    pub aug_rate: Option<f64>,
    pub data_root: Option<PathBuf>,
    pub frames_train: Option<usize>,
    pub frames_eval: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: FileConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let preset = f.preset.unwrap_or(Preset::Tiny);
        Ok(RunConfig {
            seed: f.seed.unwrap_or(0),
            preset,
            model: f.model.unwrap_or_else(|| ModelConfig::preset(preset)),
            train: f.train,
            data: f.data,
            io: f.io,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Defaults, overlaid by `file` when given, overlaid by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
                Self::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.preset {
            self.preset = p;
            self.model = ModelConfig::preset(p);
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(self.seed, o.seed);
        set!(self.train.lr, o.lr);
        set!(self.train.weight_decay, o.weight_decay);
        set!(self.train.batch_a, o.batch_a);
        set!(self.train.batch_b, o.batch_b);
        set!(self.train.epochs, o.epochs);
        set!(self.train.augment.rate, o.aug_rate);
        set!(self.data.root, o.data_root);
        set!(self.data.frames_train, o.frames_train);
        set!(self.data.frames_eval, o.frames_eval);
        set!(self.io.checkpoint_dir, o.checkpoint_dir);
        set!(self.io.metrics_dir, o.metrics_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return bad("seed must be at most 2^63 - 1");
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.augment.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) || !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if t.batch_a == 0 || t.batch_b == 0 {
            return bad("batch sizes must be positive");
        }
        if self.data.frames_train == 0 || self.data.frames_eval == 0 {
            return bad("frame counts must be positive");
        }
        let s = &self.data.split;
        if [s.train, s.valid, s.test].iter().any(|v| !v.is_finite() || *v < 0.0) || s.train + s.valid + s.test <= 0.0 {
            return bad("split ratios must be non-negative with a positive sum");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_schedule() {
        let c = RunConfig::default();
        assert_eq!((c.train.lr, c.train.weight_decay), (1e-4, 1e-4));
        assert_eq!((c.train.batch_a, c.train.batch_b, c.train.epochs), (32, 16, 30));
        assert_eq!(c.train.augment.rate, 0.9);
        assert_eq!((c.data.frames_train, c.data.frames_eval), (30, 15));
        assert_eq!((c.data.split.train, c.data.split.valid, c.data.split.test), (80.0, 15.0, 5.0));
        assert_eq!(c.model, ModelConfig::tiny());
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.preset = Preset::Toy;
        c.model = ModelConfig::toy();
        c.train.lr = 3.3e-4;
        c.train.augment.rate = 0.123456789;
        c.data.root = "some/where".into();
        c.seed = i64::MAX as u64;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = "seed = 4\npreset = \"toy\"\n[train]\nlr = 0.01\nepochs = 3\n";
        let mut c = RunConfig::from_toml(file).unwrap();
        assert_eq!((c.seed, c.train.lr, c.train.epochs, c.train.batch_a), (4, 0.01, 3, 32));
        assert_eq!(c.model, ModelConfig::toy());
        c.apply(&Overrides {
            lr: Some(0.5),
            seed: Some(9),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.train.lr, c.train.epochs), (9, 0.5, 3));
        c.apply(&Overrides {
            preset: Some(Preset::Tiny),
            ..Overrides::default()
        });
        assert_eq!(c.model, ModelConfig::tiny());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
        let mut c = RunConfig::default();
        c.train.batch_a = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.seed = 1 << 63;
        assert!(c.validate().is_err());
    }
}

//! The training driver: both networks, one epoch at a time, with separate
//! optimizers and batch streams, a metrics CSV and a checkpoint per epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use genconvit_core::datapipe::{scan_dataset, Normalization, Split, VideoRecord};
use genconvit_core::tensor::{AdamConfig, Tensor};
use genconvit_core::train::{optimizer, step_a, step_b};
use genconvit_core::{init_params, GenConViTParams, Network};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint_as, save_checkpoint, Checkpoint, RngState};
use crate::config::RunConfig;
use crate::data::{epoch_order, epoch_samples, load_batch, rng, tag, BatchSpec};
use crate::error::{CliError, Result};
use crate::evaluate::{score_videos, video_accuracy};

pub const METRICS_VERSION: u32 = 1;
pub const METRICS_COLUMNS: &str = "epoch,loss_a,loss_b,val_acc,recon_mse";
pub const CHECKPOINT_NAME: &str = "last.ckpt";
pub const METRICS_NAME: &str = "train_metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean per-sample training losses over the epoch.
    pub loss_a: f64,
    pub loss_b: f64,
    /// Video-level accuracy on the validation split, if it has videos.
    pub val_acc: Option<f64>,
    /// Mean reconstruction MSE of network B over the epoch.
    pub recon_mse: f64,
}

pub fn metrics_csv(cfg: &RunConfig, rows: &[EpochRow]) -> String {
    let t = &cfg.train;
    let mut out = format!(
        "# genconvit training metrics v{METRICS_VERSION}\n# lr={} weight_decay={} batch_a={} batch_b={} aug_rate={} frames_train={} seed={}\n{METRICS_COLUMNS}\n",
        t.lr, t.weight_decay, t.batch_a, t.batch_b, t.augment.rate, cfg.data.frames_train, cfg.seed
    );
    for r in rows {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.loss_a, r.loss_b, val, r.recon_mse);
    }
    out
}

pub struct TrainOutcome {
    pub params: GenConViTParams<f32>,
    pub history: Vec<EpochRow>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn adam(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::InvalidPath(format!("{}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| CliError::InvalidPath(format!("{}: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

struct EpochTotals {
    loss: f64,
    mse: f64,
    seen: usize,
}

/// Trains for `cfg.train.epochs` epochs in total, continuing from `resume`
/// when given.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let root = &cfg.data.root;
    if !root.is_dir() {
        return Err(CliError::MissingInput(format!("data root {} is not a directory", root.display())));
    }
    prepare_dir(&cfg.io.checkpoint_dir)?;
    prepare_dir(&cfg.io.metrics_dir)?;
    let scan = scan_dataset(root, &cfg.data.split, cfg.seed)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let train_videos: Vec<&VideoRecord> = scan.in_splits(&[Split::Train]).collect();
    let valid_videos: Vec<&VideoRecord> = scan.in_splits(&[Split::Valid]).collect();
    if train_videos.is_empty() {
        return Err(CliError::MissingInput("no training videos after splitting".into()));
    }
    log::info!(
        "{} train / {} valid videos, {} frames each per epoch",
        train_videos.len(),
        valid_videos.len(),
        cfg.data.frames_train
    );

    let (mut params, mut opts, mut history, start) = match resume {
        Some(path) => {
            let ck = load_checkpoint_as(path, &cfg.model)?;
            if ck.rng.seed != cfg.seed {
                log::warn!("checkpoint was trained with seed {}, continuing with {}", ck.rng.seed, cfg.seed);
            }
            let [mut a, mut b] = ck
                .optim
                .ok_or_else(|| CliError::Config("checkpoint has no optimizer state to resume".into()))?;
            a.config = adam(cfg);
            b.config = adam(cfg);
            log::info!("resuming after epoch {}", ck.epoch);
            (ck.params, [a, b], ck.history, ck.epoch + 1)
        }
        None => {
            let p = init_params::<f32>(&cfg.model, cfg.seed)?;
            let opts = [optimizer(&p.a, adam(cfg)), optimizer(&p.b, adam(cfg))];
            (p, opts, Vec::new(), 1)
        }
    };

    let norm = Normalization::default();
    let checkpoint = cfg.io.checkpoint_dir.join(CHECKPOINT_NAME);
    let metrics = cfg.io.metrics_dir.join(METRICS_NAME);
    for epoch in start..=cfg.train.epochs {
        let samples = epoch_samples(&train_videos, cfg.data.frames_train, cfg.seed, epoch);
        let mut totals = Vec::new();
        for (net, opt) in Network::ALL.into_iter().zip(opts.iter_mut()) {
            let net_tag = net as u64;
            let size = match net {
                Network::A => cfg.train.batch_a,
                Network::B => cfg.train.batch_b,
            };
            let spec = BatchSpec {
                size: cfg.model.image_size,
                norm: &norm,
                augment: &cfg.train.augment,
                seed: cfg.seed,
                net: net_tag,
                epoch,
            };
            let order = epoch_order(samples.len(), cfg.seed, net_tag, epoch);
            let mut t = EpochTotals {
                loss: 0.0,
                mse: 0.0,
                seen: 0,
            };
            for (bi, idx) in order.chunks(size).enumerate() {
                // A lone trailing sample would give batch norm no spread.
                if idx.len() < 2 && t.seen > 0 {
                    continue;
                }
                let (x, y) = load_batch(&samples, idx, &spec)?;
                let n = y.len();
                let diverged = |e: genconvit_core::Error| match e {
                    genconvit_core::Error::NonFiniteLoss(v) => {
                        CliError::NonFinite(format!("network {net:?}, epoch {epoch}, batch {bi}: loss {v}"))
                    }
                    other => other.into(),
                };
                match net {
                    Network::A => {
                        let loss = step_a(&mut params.a, opt, &cfg.model, x, &y).map_err(diverged)?;
                        t.loss += loss * n as f64;
                    }
                    Network::B => {
                        let mut r = rng(cfg.seed, &[tag::NOISE, epoch as u64, bi as u64]);
                        let latent = cfg.model.latent_dim();
                        let eps = Tensor::from_fn(&[n, latent], |_| StandardNormal.sample(&mut r));
                        let s = step_b(&mut params.b, opt, &cfg.model, &norm, x, &y, Some(eps)).map_err(diverged)?;
                        t.loss += s.loss * n as f64;
                        t.mse += s.mse * n as f64;
                    }
                }
                t.seen += n;
                log::debug!("epoch {epoch} network {net:?} batch {bi}: {} samples", n);
            }
            totals.push(t);
        }
        let val_acc = if valid_videos.is_empty() {
            None
        } else {
            video_accuracy(&score_videos(&params, &cfg.model, &valid_videos, cfg.data.frames_eval)?)
        };
        let row = EpochRow {
            epoch,
            loss_a: totals[0].loss / totals[0].seen as f64,
            loss_b: totals[1].loss / totals[1].seen as f64,
            val_acc,
            recon_mse: totals[1].mse / totals[1].seen as f64,
        };
        log::info!(
            "epoch {epoch}: loss_a {:.4} loss_b {:.4} recon_mse {:.5} val_acc {}",
            row.loss_a,
            row.loss_b,
            row.recon_mse,
            row.val_acc.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
        history.push(row);

        let ck = Checkpoint {
            config: cfg.clone(),
            epoch,
            rng: RngState {
                seed: cfg.seed,
                next_epoch: epoch + 1,
            },
            history,
            params,
            optim: Some(opts),
        };
        save_checkpoint(&ck, &checkpoint)?;
        fs::write(&metrics, metrics_csv(cfg, &ck.history))
            .map_err(|e| CliError::InvalidPath(format!("{}: {e}", metrics.display())))?;
        (history, params) = (ck.history, ck.params);
        opts = ck.optim.expect("set above");
    }
    if start > cfg.train.epochs {
        log::warn!("checkpoint already covers {} epochs; nothing to do", start - 1);
    }
    Ok(TrainOutcome {
        params,
        history,
        checkpoint,
        metrics,
    })
}

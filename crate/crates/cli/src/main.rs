use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genconvit_cli::checkpoint::{load_checkpoint_as, read_config};
use genconvit_cli::config::{Overrides, RunConfig};
use genconvit_cli::error::{CliError, Result};
use genconvit_cli::evaluate::{predict_frames, roc_from_scores, score_videos, write_eval};
use genconvit_cli::train::train;
use genconvit_core::datapipe::{gen_synthetic, list_frames, scan_dataset, Split, SynthConfig};
use genconvit_core::Preset;

#[derive(Parser)]
#[command(name = "genconvit", version, about = "Deepfake video detection with generative ConvNeXt-Swin hybrids")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model scale: `tiny` (full widths) or `toy`.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic real/fake frame dataset.
    Synth(SynthArgs),
    /// Train networks A and B.
    Train(TrainArgs),
    /// Score a split of the dataset and write the report and ROC.
    Eval(EvalArgs),
    /// Score one directory of frames.
    Predict(PredictArgs),
    /// Redraw a ROC curve from an `eval_scores.csv`.
    Roc(RocArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Videos per class.
    #[arg(long, default_value_t = 10)]
    videos: usize,
    #[arg(long, default_value_t = 15)]
    frames: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Dataset root with `real/` and `fake/` video directories.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    frames_eval: Option<usize>,
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_a: Option<usize>,
    #[arg(long)]
    batch_b: Option<usize>,
    /// Probability that a training sample is augmented.
    #[arg(long)]
    aug_rate: Option<f64>,
    #[arg(long)]
    frames_train: Option<usize>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitChoice {
    /// Validation and test videos together.
    Heldout,
    Train,
    Valid,
    Test,
    All,
}

impl SplitChoice {
    fn splits(self) -> &'static [Split] {
        match self {
            SplitChoice::Heldout => &[Split::Valid, Split::Test],
            SplitChoice::Train => &[Split::Train],
            SplitChoice::Valid => &[Split::Valid],
            SplitChoice::Test => &[Split::Test],
            SplitChoice::All => &[Split::Train, Split::Valid, Split::Test],
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    split: SplitChoice,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frames_eval: Option<usize>,
    /// Directory holding one video's frames.
    video: PathBuf,
}

#[derive(Args)]
struct RocArgs {
    /// An `eval_scores.csv` written by `eval`.
    #[arg(long)]
    scores: PathBuf,
    /// SVG path; the points go to the sibling `.csv`.
    #[arg(long)]
    out: PathBuf,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            preset: self.preset,
            ..Overrides::default()
        }
    }

    /// Configuration for commands that read a checkpoint: its stored run
    /// config is the base layer unless a config file replaces it.
    fn checkpoint_config(&self, checkpoint: &Path, flags: &Overrides) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(_) => return RunConfig::resolve(self.config.as_deref(), flags),
            None => read_config(checkpoint)?,
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn common(o: &mut Overrides, c: &CommonArgs) {
    o.data_root = c.data.clone();
    o.frames_eval = c.frames_eval;
    o.metrics_dir = c.metrics_dir.clone();
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                videos: a.videos,
                frames: a.frames,
                size: a.size,
                seed: cli.seed.unwrap_or(0),
            };
            let summary = gen_synthetic(&cfg, &a.out).map_err(|e| match e {
                genconvit_core::Error::Io { .. } | genconvit_core::Error::Image { .. } => {
                    CliError::InvalidPath(e.to_string())
                }
                other => other.into(),
            })?;
            println!(
                "wrote {} videos per class to {}: {} real and {} fake images",
                summary.videos_per_class,
                a.out.display(),
                summary.real_images,
                summary.fake_images
            );
        }
        Command::Train(a) => {
            let mut o = cli.overrides();
            common(&mut o, &a.common);
            o.epochs = a.epochs;
            o.lr = a.lr;
            o.weight_decay = a.weight_decay;
            o.batch_a = a.batch_a;
            o.batch_b = a.batch_b;
            o.aug_rate = a.aug_rate;
            o.frames_train = a.frames_train;
            o.checkpoint_dir = a.checkpoint_dir.clone();
            let cfg = RunConfig::resolve(cli.config.as_deref(), &o)?;
            let out = train(&cfg, a.resume.as_deref())?;
            if let Some(last) = out.history.last() {
                println!(
                    "epoch {}: loss_a {:.4} loss_b {:.4} recon_mse {:.5}",
                    last.epoch, last.loss_a, last.loss_b, last.recon_mse
                );
            }
            println!("checkpoint {}", out.checkpoint.display());
            println!("metrics {}", out.metrics.display());
        }
        Command::Eval(a) => {
            let mut o = cli.overrides();
            common(&mut o, &a.common);
            let cfg = cli.checkpoint_config(&a.checkpoint, &o)?;
            let ck = load_checkpoint_as(&a.checkpoint, &cfg.model)?;
            let root = &cfg.data.root;
            if !root.is_dir() {
                return Err(CliError::MissingInput(format!("data root {} is not a directory", root.display())));
            }
            let scan = scan_dataset(root, &cfg.data.split, cfg.seed)?;
            let videos: Vec<_> = scan.in_splits(a.split.splits()).collect();
            if videos.is_empty() {
                return Err(CliError::MissingInput("no videos in the requested split".into()));
            }
            let scores = score_videos(&ck.params, &cfg.model, &videos, cfg.data.frames_eval)?;
            let out = write_eval(&scores, &cfg.io.metrics_dir)?;
            let r = &out.report;
            println!(
                "videos {} accuracy {:.4} f1 {:.4} auc {}",
                r.samples,
                r.accuracy,
                r.f1,
                r.auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
            );
            println!("report {}", out.report_path.display());
            if let Some(p) = out.roc_path {
                println!("roc {}", p.display());
            }
        }
        Command::Predict(a) => {
            let mut o = cli.overrides();
            o.frames_eval = a.frames_eval;
            let cfg = cli.checkpoint_config(&a.checkpoint, &o)?;
            if !a.video.is_dir() {
                return Err(CliError::MissingInput(format!("{} is not a directory", a.video.display())));
            }
            let frames = list_frames(&a.video, &mut Vec::new())?;
            if frames.is_empty() {
                return Err(CliError::EmptyInput(format!("no image files in {}", a.video.display())));
            }
            let ck = load_checkpoint_as(&a.checkpoint, &cfg.model)?;
            let r = predict_frames(&ck.params, &cfg.model, &frames, cfg.data.frames_eval)?;
            let id = a.video.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            println!("{id}  {:.6}  {}  {}", r.video_score, r.verdict, r.frames_used);
        }
        Command::Roc(a) => {
            let (svg, auc) = roc_from_scores(&a.scores, &a.out)?;
            println!("auc {auc:.6}");
            println!("roc {}", svg.display());
        }
    }
    Ok(())
}

fn set_threads(n: Option<usize>) {
    let Some(n) = n else { return };
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without the `parallel` feature; --threads {n} ignored");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    set_threads(cli.threads);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Video-level scoring, evaluation reports and ROC emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use genconvit_core::datapipe::{Label, Normalization, VideoRecord};
use genconvit_core::metrics::{emit_roc_plot, roc_curve, EvalReport};
use genconvit_core::{predict_video, GenConViTParams, ModelConfig, PredictionResult, Verdict, FAKE_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::data::{par_map, video_frames};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub label: Label,
    pub score: f64,
    pub verdict: Verdict,
    pub frames_used: usize,
}

/// Predicts one directory of frames, all `frames` of them in one pass.
pub fn predict_frames(
    params: &GenConViTParams<f32>,
    model: &ModelConfig,
    paths: &[PathBuf],
    frames: usize,
) -> Result<PredictionResult> {
    let norm = Normalization::default();
    let batch = video_frames(paths, frames, model.image_size, &norm)?;
    Ok(predict_video(params, model, &batch, frames)?)
}

/// Scores every video, in input order; videos run in parallel.
pub fn score_videos(
    params: &GenConViTParams<f32>,
    model: &ModelConfig,
    videos: &[&VideoRecord],
    frames: usize,
) -> Result<Vec<VideoScore>> {
    par_map(videos, |v| {
        let r = predict_frames(params, model, &v.frames, frames)?;
        Ok(VideoScore {
            video_id: v.video_id.clone(),
            label: v.label,
            score: r.video_score,
            verdict: r.verdict,
            frames_used: r.frames_used,
        })
    })
    .into_iter()
    .collect()
}

/// Fraction of videos whose verdict matches the label.
pub fn video_accuracy(scores: &[VideoScore]) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let right = scores
        .iter()
        .filter(|s| (s.verdict == Verdict::Fake) == (s.label == Label::Fake))
        .count();
    Some(right as f64 / scores.len() as f64)
}

pub fn report(scores: &[VideoScore]) -> Result<EvalReport> {
    let (s, l): (Vec<f64>, Vec<Label>) = scores.iter().map(|v| (v.score, v.label)).unzip();
    Ok(EvalReport::new(&s, &l, FAKE_THRESHOLD)?)
}

pub const SCORES_HEADER: &str = "video_id,label,score,verdict,frames_used";

pub fn scores_csv(scores: &[VideoScore]) -> String {
    let mut out = format!("{SCORES_HEADER}\n");
    for s in scores {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.video_id,
            s.label.index(),
            s.score,
            s.verdict.to_string().to_lowercase(),
            s.frames_used
        );
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<(f64, Label)>> {
    let bad = |line: usize, what: &str| CliError::Config(format!("scores line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.starts_with("video_id,label,score") => {}
        _ => return Err(bad(1, "expected header `video_id,label,score,...`")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < 3 {
                return Err(bad(i + 1, "too few columns"));
            }
            let label = f[1].parse::<u8>().map_err(|_| bad(i + 1, "label"))?;
            let label = Label::from_index(label).map_err(|e| bad(i + 1, &e.to_string()))?;
            let score = f[2].parse::<f64>().map_err(|_| bad(i + 1, "score"))?;
            Ok((score, label))
        })
        .collect()
}

pub struct EvalOutputs {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub scores_path: PathBuf,
    pub roc_path: Option<PathBuf>,
}

/// Writes `eval_report.json`, `eval_scores.csv` and, when both classes are
/// present, `roc.svg` with its `roc.csv`.
pub fn write_eval(scores: &[VideoScore], dir: &Path) -> Result<EvalOutputs> {
    fs::create_dir_all(dir).map_err(|e| CliError::InvalidPath(format!("{}: {e}", dir.display())))?;
    let report = report(scores)?;
    let write = |name: &str, text: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::InvalidPath(format!("{}: {e}", p.display())))?;
        Ok(p)
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let report_path = write("eval_report.json", &json)?;
    let scores_path = write("eval_scores.csv", &scores_csv(scores))?;
    let roc_path = if report.roc_points.len() >= 2 {
        let svg = dir.join("roc.svg");
        emit_roc_plot(&report.roc_points, report.auc, &svg)?;
        Some(svg)
    } else {
        None
    };
    Ok(EvalOutputs {
        report,
        report_path,
        scores_path,
        roc_path,
    })
}

/// ROC plot from an `eval_scores.csv`; returns the SVG path and the AUC.
pub fn roc_from_scores(scores: &Path, out: &Path) -> Result<(PathBuf, f64)> {
    let text = fs::read_to_string(scores).map_err(|e| CliError::MissingInput(format!("{}: {e}", scores.display())))?;
    let (s, l): (Vec<f64>, Vec<Label>) = parse_scores_csv(&text)?.into_iter().unzip();
    let points = roc_curve(&s, &l)?;
    let auc = genconvit_core::metrics::auc(&s, &l)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::InvalidPath(format!("{}: {e}", parent.display())))?;
    }
    emit_roc_plot(&points, Some(auc), out)?;
    Ok((out.to_path_buf(), auc))
}

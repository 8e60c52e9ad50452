//! Binary classification metrics with FAKE as the positive class, ROC/AUC
//! and ROC plot emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::scan::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Recall of each class: (real, fake).
    pub fn per_class_accuracy(&self) -> (f64, f64) {
        (ratio(self.tn, self.tn + self.fp), self.recall())
    }
}

/// `num / den`, or 0 for an empty denominator.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_lengths(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    Ok(())
}

/// Score `>= threshold` predicts FAKE.
pub fn confusion(scores: &[f64], labels: &[Label], threshold: f64) -> Result<Confusion> {
    check_lengths(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, Label::Fake) => c.tp += 1,
            (true, Label::Real) => c.fp += 1,
            (false, Label::Real) => c.tn += 1,
            (false, Label::Fake) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Harmonic mean of precision and recall; 0 when either is undefined.
pub fn f1_score(c: &Confusion) -> f64 {
    if c.tp + c.fp == 0 || c.tp + c.fn_ == 0 {
        log::warn!("F1 undefined (no predicted or no actual positives); reporting 0");
        return 0.0;
    }
    let (p, r) = (c.precision(), c.recall());
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with score `>= threshold` are called FAKE; the first point
    /// uses `+inf`.
    #[serde(with = "inf_as_string")]
    pub threshold: f64,
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Cumulative (fp, tp) counts at each threshold: `+inf` then every unique
/// score in descending order. Also returns (#negatives, #positives).
fn roc_counts(scores: &[f64], labels: &[Label]) -> Result<(Vec<(usize, usize, f64)>, usize, usize)> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Config("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Fake).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0, 0, f64::INFINITY)];
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            match labels[order[i]] {
                Label::Fake => tp += 1,
                Label::Real => fp += 1,
            }
            i += 1;
        }
        out.push((fp, tp, t));
    }
    Ok((out, neg, pos))
}

pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>> {
    let (counts, neg, pos) = roc_counts(scores, labels)?;
    Ok(counts
        .into_iter()
        .map(|(fp, tp, threshold)| RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        })
        .collect())
}

/// Trapezoidal area under the ROC curve. The trapezoids are summed in
/// integer counts and divided once, so tied scores contribute exactly half
/// a pair each, as in the Mann-Whitney statistic.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (counts, neg, pos) = roc_counts(scores, labels)?;
    let twice_area: u128 = counts
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0) * (w[0].1 + w[1].1)) as u128)
        .sum();
    Ok(twice_area as f64 / (2 * neg * pos) as f64)
}

/// P(score_fake > score_real) + ½ P(equal), by enumerating every pair.
pub fn pairwise_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let fake: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == Label::Fake).map(|(&s, _)| s).collect();
    let real: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == Label::Real).map(|(&s, _)| s).collect();
    if fake.is_empty() || real.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut twice: u128 = 0;
    for &f in &fake {
        for &r in &real {
            twice += match f.partial_cmp(&r) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * fake.len() * real.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub real: f64,
    pub fake: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub threshold: f64,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub per_class_accuracy: PerClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub roc_points: Vec<RocPoint>,
}

impl EvalReport {
    pub fn new(scores: &[f64], labels: &[Label], threshold: f64) -> Result<Self> {
        let c = confusion(scores, labels, threshold)?;
        let (auc, roc_points) = match roc_curve(scores, labels) {
            Ok(points) => (Some(auc(scores, labels)?), points),
            Err(Error::SingleClass) => {
                log::warn!("evaluation set has a single class; AUC omitted");
                (None, Vec::new())
            }
            Err(e) => return Err(e),
        };
        let (real, fake) = c.per_class_accuracy();
        Ok(EvalReport {
            samples: c.total(),
            threshold,
            confusion: c,
            accuracy: c.accuracy(),
            per_class_accuracy: PerClass { real, fake },
            precision: c.precision(),
            recall: c.recall(),
            f1: f1_score(&c),
            auc,
            roc_points,
        })
    }
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        if t > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{t}")
    }
}

/// `fpr,tpr,threshold` header, then one row per point at full precision.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, fmt_threshold(p.threshold));
    }
    s
}

pub fn roc_svg(points: &[RocPoint], auc: Option<f64>) -> String {
    const SIZE: f64 = 400.0;
    const M: f64 = 50.0;
    let plot = SIZE - 2.0 * M;
    let x = |v: f64| M + v * plot;
    let y = |v: f64| SIZE - M - v * plot;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{plot}" height="{plot}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{v:.2}</text>"#,
            x(v),
            SIZE - M + 15.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.2}</text>"#,
            M - 5.0,
            y(v) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let pts: Vec<String> = points.iter().map(|p| format!("{:.3},{:.3}", x(p.fpr), y(p.tpr))).collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">False positive rate</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">True positive rate</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    let label = match auc {
        Some(a) => format!("AUC = {a:.4}"),
        None => "AUC = n/a".to_string(),
    };
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="end">{label}</text>"#,
        x(1.0) - 10.0,
        y(0.0) - 12.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes the SVG to `out` and the points to `out` with a `.csv` extension.
/// Returns the CSV path.
pub fn emit_roc_plot(points: &[RocPoint], auc: Option<f64>, out: &Path) -> Result<PathBuf> {
    if points.len() < 2 {
        return Err(Error::Config(format!("ROC plot needs at least 2 points, got {}", points.len())));
    }
    fs::write(out, roc_svg(points, auc)).map_err(|e| Error::io(out, e))?;
    let csv = out.with_extension("csv");
    fs::write(&csv, roc_csv(points)).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}

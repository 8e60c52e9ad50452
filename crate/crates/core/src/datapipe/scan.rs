//! Dataset layout `root/{real,fake}/<video>/<frame>.{png,jpg}`, video-level
//! splitting and the tab-separated manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::BadLabel(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Fractions of videos per split; normalized on use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 80.0,
            valid: 15.0,
            test: 5.0,
        }
    }
}

impl SplitRatios {
    /// Video counts per split for `n` videos: train and valid are rounded,
    /// test takes the remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let total = self.train + self.valid + self.test;
        let train = ((self.train / total) * n as f64).round() as usize;
        let train = train.min(n);
        let valid = (((self.valid / total) * n as f64).round() as usize).min(n - train);
        [train, valid, n - train - valid]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: Label,
    pub video_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoRecord {
    pub dir: PathBuf,
    pub label: Label,
    /// `<class>/<directory name>`.
    pub video_id: String,
    pub split: Split,
    /// Sorted frame paths.
    pub frames: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct Scan {
    pub videos: Vec<VideoRecord>,
    pub warnings: Vec<String>,
}

impl Scan {
    pub fn samples(&self) -> Vec<SampleRecord> {
        self.videos
            .iter()
            .flat_map(|v| {
                v.frames.iter().map(move |p| SampleRecord {
                    path: p.clone(),
                    label: v.label,
                    video_id: v.video_id.clone(),
                    split: v.split,
                })
            })
            .collect()
    }

    pub fn in_splits<'a>(&'a self, splits: &'a [Split]) -> impl Iterator<Item = &'a VideoRecord> + 'a {
        self.videos.iter().filter(move |v| splits.contains(&v.split))
    }
}

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Sorted image files directly inside `dir`; `other` collects the rest.
pub fn list_frames(dir: &Path, other: &mut Vec<String>) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            frames.push(path);
        } else {
            other.push(format!("skipped {}", path.display()));
        }
    }
    frames.sort();
    Ok(frames)
}

fn split_key(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// Split per video name: videos are ordered by `sha256(seed, name)` and
/// cut by [`SplitRatios::counts`]. Identical names get identical splits
/// whatever class they belong to.
pub fn assign_splits(names: &[String], ratios: &SplitRatios, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_cached_key(|&i| (split_key(seed, &names[i]), i));
    let [train, valid, _] = ratios.counts(names.len());
    let mut out = vec![Split::Test; names.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < train {
            Split::Train
        } else if rank < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

pub fn scan_dataset(root: &Path, ratios: &SplitRatios, seed: u64) -> Result<Scan> {
    let mut scan = Scan::default();
    for label in Label::ALL {
        let class_dir = root.join(label.dir_name());
        let mut dirs = Vec::new();
        if class_dir.is_dir() {
            for entry in fs::read_dir(&class_dir).map_err(|e| Error::io(&class_dir, e))? {
                let path = entry.map_err(|e| Error::io(&class_dir, e))?.path();
                if path.is_dir() {
                    dirs.push(path);
                }
            }
        }
        dirs.sort();
        let mut videos = Vec::new();
        for dir in dirs {
            let frames = list_frames(&dir, &mut scan.warnings)?;
            if frames.is_empty() {
                scan.warnings.push(format!("no frames in {}", dir.display()));
                continue;
            }
            videos.push((dir, frames));
        }
        if videos.is_empty() {
            return Err(Error::EmptyClass(label.dir_name()));
        }
        let names: Vec<String> = videos
            .iter()
            .map(|(d, _)| d.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        let splits = assign_splits(&names, ratios, seed);
        for (((dir, frames), name), split) in videos.into_iter().zip(names).zip(splits) {
            scan.videos.push(VideoRecord {
                dir,
                label,
                video_id: format!("{}/{name}", label.dir_name()),
                split,
                frames,
            });
        }
    }
    Ok(scan)
}

/// One `path<TAB>label<TAB>video_id<TAB>split` line per record.
pub fn write_manifest(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.path.display(),
            r.label.index(),
            r.video_id,
            r.split
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {line}: {msg}")),
        )
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let label: u8 = f[1].parse().map_err(|_| bad(i + 1, format!("label `{}`", f[1])))?;
        out.push(SampleRecord {
            path: PathBuf::from(f[0]),
            label: Label::from_index(label)?,
            video_id: f[2].to_string(),
            split: f[3].parse().map_err(|e| bad(i + 1, e))?,
        });
    }
    Ok(out)
}

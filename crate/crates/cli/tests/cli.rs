//! The binary end to end: outputs, flags and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn genconvit(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_genconvit"));
    cmd.args(args).args(paths).env("RUST_LOG", "warn");
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Digest of every file under `root`, by relative path and content.
fn tree_hash(root: &Path) -> String {
    fn walk(dir: &Path, root: &Path, files: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, files);
            } else {
                files.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(root, root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    format!("{:x}", h.finalize())
}

fn synth(dir: &Path, seed: &str, videos: &str, frames: &str) {
    ok(&genconvit(
        &["--seed", seed, "synth", "--videos", videos, "--frames", frames, "--size", "64", "--out"],
        &[dir],
    ));
}

#[test]
fn synth_is_reproducible_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let (one, two, other) = (tmp.path().join("1"), tmp.path().join("2"), tmp.path().join("3"));
    synth(&one, "4", "3", "5");
    synth(&two, "4", "3", "5");
    synth(&other, "5", "3", "5");
    assert_eq!(tree_hash(&one), tree_hash(&two));
    assert_ne!(tree_hash(&one), tree_hash(&other));
    for class in ["real", "fake"] {
        let videos: Vec<_> = fs::read_dir(one.join(class)).unwrap().collect();
        assert_eq!(videos.len(), 3);
        assert_eq!(fs::read_dir(one.join(class).join("vid_0002")).unwrap().count(), 5);
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain-file");
    fs::write(&file, b"x").unwrap();

    // An output path below a regular file cannot be created.
    let out = genconvit(&["synth", "--videos", "1", "--frames", "1", "--out"], &[&file.join("data")]);
    assert_eq!(out.status.code(), Some(2));

    let out = genconvit(&["train", "--data"], &[&tmp.path().join("missing")]);
    assert_eq!(out.status.code(), Some(4));

    let out = genconvit(&["eval", "--checkpoint"], &[&tmp.path().join("none.ckpt")]);
    assert_eq!(out.status.code(), Some(4));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = genconvit(&["--config", cfg.to_str().unwrap(), "train", "--data"], &[tmp.path()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_and_roc_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1", "6", "7");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 1\npreset = \"toy\"\n[train]\nlr = 0.002\nepochs = 1\n").unwrap();
    let (ck, metrics) = (tmp.path().join("ck"), tmp.path().join("m"));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_genconvit"));
    cmd.args(["--config", cfg.to_str().unwrap(), "--threads", "1", "train", "--frames-train", "2", "--lr", "0.003"])
        .arg("--data")
        .arg(&data)
        .arg("--checkpoint-dir")
        .arg(&ck)
        .arg("--metrics-dir")
        .arg(&metrics);
    ok(&cmd.output().unwrap());

    // Flag beats file: the header records the command-line learning rate.
    let csv = fs::read_to_string(metrics.join("train_metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains("lr=0.003 "), "{csv}");
    assert_eq!(csv.lines().nth(2), Some("epoch,loss_a,loss_b,val_acc,recon_mse"));
    assert_eq!(csv.lines().count(), 4);

    let checkpoint = ck.join("last.ckpt");
    let video = data.join("fake").join("vid_0000");
    let line = ok(&genconvit(&["predict", "--checkpoint", checkpoint.to_str().unwrap()], &[&video]));
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields[0], "vid_0000");
    let score: f64 = fields[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&score));
    assert_eq!(fields[2], if score >= 0.5 { "FAKE" } else { "REAL" });
    assert_eq!(fields[3], "7", "all 7 frames are used when fewer than 15 exist");

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = genconvit(&["predict", "--checkpoint", checkpoint.to_str().unwrap()], &[&empty]);
    assert_eq!(out.status.code(), Some(3));

    let eval_dir = tmp.path().join("eval");
    let text = ok(&genconvit(
        &["eval", "--split", "all", "--checkpoint", checkpoint.to_str().unwrap(), "--metrics-dir"],
        &[&eval_dir],
    ));
    assert!(text.contains("videos 12 "), "{text}");
    let scores = fs::read_to_string(eval_dir.join("eval_scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 13);
    let redrawn = tmp.path().join("again").join("roc.svg");
    ok(&genconvit(&["roc", "--scores", eval_dir.join("eval_scores.csv").to_str().unwrap(), "--out"], &[&redrawn]));
    assert_eq!(fs::read(&redrawn).unwrap(), fs::read(eval_dir.join("roc.svg")).unwrap());
}

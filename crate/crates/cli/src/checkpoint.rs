//! Checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GCVTCKPT"
//! 8       4     format version, u32 LE (currently 1)
//! 12      8     header length H, u64 LE
//! 20      H     header, UTF-8 JSON (see `Header`)
//! 20+H    ...   blob: every tensor's values back to back, little-endian
//! ```
//!
//! Each header `tensors` entry holds `name`, `role`, `dtype`, `shape` and
//! its byte `offset` into the blob. Entries are stored in blob order with
//! no gaps. Roles:
//!
//! - `param`: a learnable tensor under its canonical name (`a.*` or `b.*`).
//! - `running_mean` and `running_var`: batch-norm statistics, named after
//!   the norm layer.
//! - `adam_m` and `adam_v`: optimizer moments, named after their parameter.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use genconvit_core::genconvit::{network_layout, Layout};
use genconvit_core::nn::ParamStore;
use genconvit_core::tensor::{AdamConfig, AdamState, RunningStats, Tensor};
use genconvit_core::{GenConViTParams, ModelConfig, Network};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::train::EpochRow;

pub const MAGIC: &[u8; 8] = b"GCVTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported checkpoint: {0}")]
    Version(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds tensor `{0}` that the model does not have")]
    UnknownTensor(String),
    #[error("checkpoint lacks tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("checkpoint shapes do not fit the model: {}", format_mismatches(.0))]
    ShapeMismatch(Vec<ShapeMismatch>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub name: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

fn format_mismatches(m: &[ShapeMismatch]) -> String {
    m.iter()
        .map(|m| format!("{} (model {:?}, file {:?})", m.name, m.expected, m.found))
        .collect::<Vec<_>>()
        .join(", ")
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Seed and position of the epoch-keyed random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochRow>,
    pub params: GenConViTParams<f32>,
    /// Adam state of networks A and B.
    pub optim: Option<[AdamState<f32>; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    RunningMean,
    RunningVar,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    role: Role,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    epoch: usize,
    rng: RngState,
    history: Vec<EpochRow>,
    optimizer: Option<[OptimMeta; 2]>,
    tensors: Vec<Entry>,
    blob_len: u64,
}

/// Tensors in blob order.
fn tensors(ck: &Checkpoint) -> Vec<(Role, &str, &[usize], &[f32])> {
    let mut out = Vec::new();
    for (i, net) in Network::ALL.into_iter().enumerate() {
        let store = ck.params.network(net);
        for (name, v) in store.names().iter().zip(store.values()) {
            out.push((Role::Param, name.as_str(), v.shape(), v.data()));
        }
        for (name, s) in store.stats() {
            out.push((Role::RunningMean, name.as_str(), &[][..], &s.mean[..]));
            out.push((Role::RunningVar, name.as_str(), &[][..], &s.var[..]));
        }
        if let Some(opt) = &ck.optim {
            for (name, (m, v)) in store.names().iter().zip(opt[i].m.iter().zip(&opt[i].v)) {
                out.push((Role::AdamM, name.as_str(), m.shape(), m.data()));
                out.push((Role::AdamV, name.as_str(), v.shape(), v.data()));
            }
        }
    }
    out
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let list = tensors(ck);
    let mut offset = 0u64;
    let entries = list
        .iter()
        .map(|(role, name, shape, data)| {
            // Statistics are vectors; their shape is their length.
            let shape = if shape.is_empty() { vec![data.len()] } else { shape.to_vec() };
            let e = Entry {
                name: name.to_string(),
                role: *role,
                dtype: "f32".into(),
                shape,
                offset,
            };
            offset += 4 * data.len() as u64;
            e
        })
        .collect();
    let header = Header {
        config: ck.config.clone(),
        epoch: ck.epoch,
        rng: ck.rng,
        history: ck.history.clone(),
        optimizer: ck.optim.as_ref().map(|o| {
            [&o[0], &o[1]].map(|s| OptimMeta {
                lr: s.config.lr,
                beta1: s.config.beta1,
                beta2: s.config.beta2,
                eps: s.config.eps,
                weight_decay: s.config.weight_decay,
                step: s.step,
            })
        }),
        tensors: entries,
        blob_len: offset,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let tmp = path.with_extension("ckpt.partial");
    let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
    let write = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, _, data) in &list {
            for v in data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(io_err)?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(format!("ends inside {what}")),
        _ => CheckpointError::Corrupt(format!("{what}: {e}")),
    })
}

fn open(path: &Path) -> Result<(BufReader<File>, Header)> {
    let file = File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 20];
    read_exact(&mut r, &mut head[..8], "magic")?;
    if &head[..8] != MAGIC {
        return Err(CheckpointError::Version("bad magic, not a checkpoint file".into()));
    }
    read_exact(&mut r, &mut head[8..], "preamble")?;
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(head[12..20].try_into().unwrap());
    let file_len = r.get_ref().metadata().map(|m| m.len()).unwrap_or(u64::MAX);
    if 20 + len > file_len {
        return Err(CheckpointError::Truncated(format!("header claims {len} bytes")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact(&mut r, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if 20 + len + header.blob_len > file_len {
        return Err(CheckpointError::Truncated(format!(
            "blob needs {} bytes, file has {}",
            header.blob_len,
            file_len - 20 - len
        )));
    }
    Ok((r, header))
}

/// The run configuration stored in a checkpoint, without reading tensors.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    Ok(open(path)?.1.config)
}

/// Loads a checkpoint for the architecture it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (r, header) = open(path)?;
    let model = header.config.model.clone();
    load_with(r, header, &model)
}

/// Loads a checkpoint, checking every tensor against `model`.
pub fn load_checkpoint_as(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let (r, header) = open(path)?;
    load_with(r, header, model)
}

fn load_with(mut r: BufReader<File>, header: Header, model: &ModelConfig) -> Result<Checkpoint> {
    let layouts: Vec<Layout> = Network::ALL
        .iter()
        .map(|&n| network_layout(model, n))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CheckpointError::Corrupt(format!("model config: {e}")))?;

    // Expected shape of every (role, name) the model defines.
    let mut expected: HashMap<(Role, &str), Vec<usize>> = HashMap::new();
    for layout in &layouts {
        for (name, shape) in &layout.params {
            expected.insert((Role::Param, name), shape.clone());
            if header.optimizer.is_some() {
                expected.insert((Role::AdamM, name), shape.clone());
                expected.insert((Role::AdamV, name), shape.clone());
            }
        }
        for (name, ch) in &layout.stats {
            expected.insert((Role::RunningMean, name), vec![*ch]);
            expected.insert((Role::RunningVar, name), vec![*ch]);
        }
    }

    let mut mismatches = Vec::new();
    let mut offset = 0u64;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::Corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != offset {
            return Err(CheckpointError::Corrupt(format!("{}: offset {} out of order", e.name, e.offset)));
        }
        offset += 4 * e.shape.iter().product::<usize>() as u64;
        match expected.get(&(e.role, e.name.as_str())) {
            None => return Err(CheckpointError::UnknownTensor(e.name.clone())),
            Some(shape) if *shape != e.shape => {
                if e.role == Role::Param || e.role == Role::RunningMean {
                    mismatches.push(ShapeMismatch {
                        name: e.name.clone(),
                        expected: shape.clone(),
                        found: e.shape.clone(),
                    });
                }
            }
            Some(_) => {}
        }
    }
    if offset != header.blob_len {
        return Err(CheckpointError::Corrupt(format!(
            "tensors cover {offset} bytes, blob_len says {}",
            header.blob_len
        )));
    }
    if !mismatches.is_empty() {
        return Err(CheckpointError::ShapeMismatch(mismatches));
    }
    if header.tensors.len() != expected.len() {
        let present: std::collections::HashSet<(Role, &str)> =
            header.tensors.iter().map(|e| (e.role, e.name.as_str())).collect();
        let mut missing: Vec<String> = expected
            .keys()
            .filter(|k| !present.contains(*k))
            .map(|(role, name)| format!("{name} ({role:?})"))
            .collect();
        missing.sort();
        if missing.is_empty() {
            return Err(CheckpointError::Corrupt("duplicate tensor entries".into()));
        }
        return Err(CheckpointError::MissingTensors(missing));
    }

    let mut values: HashMap<(Role, String), Vec<f32>> = HashMap::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        read_exact(&mut r, &mut bytes, &e.name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        values.insert((e.role, e.name.clone()), data);
    }

    let mut take = |role: Role, name: &str, shape: &[usize]| -> Tensor<f32> {
        let data = values.remove(&(role, name.to_string())).expect("checked above");
        Tensor::from_vec(shape, data).expect("checked above")
    };
    let mut stores = Vec::new();
    let mut optim = Vec::new();
    for (layout, meta) in layouts.iter().zip(
        header
            .optimizer
            .as_ref()
            .map(|o| [Some(&o[0]), Some(&o[1])])
            .unwrap_or([None, None]),
    ) {
        let mut store = ParamStore::new();
        for (name, shape) in &layout.params {
            store
                .insert(name.clone(), take(Role::Param, name, shape))
                .expect("layout names are unique");
        }
        for (name, ch) in &layout.stats {
            let mean = take(Role::RunningMean, name, &[*ch]).data().to_vec();
            let var = take(Role::RunningVar, name, &[*ch]).data().to_vec();
            store.insert_stats(name.clone(), RunningStats { mean, var });
        }
        if let Some(meta) = meta {
            let (m, v) = layout
                .params
                .iter()
                .map(|(name, shape)| (take(Role::AdamM, name, shape), take(Role::AdamV, name, shape)))
                .unzip();
            optim.push(AdamState {
                config: AdamConfig {
                    lr: meta.lr,
                    beta1: meta.beta1,
                    beta2: meta.beta2,
                    eps: meta.eps,
                    weight_decay: meta.weight_decay,
                },
                step: meta.step,
                m,
                v,
            });
        }
        stores.push(store);
    }
    let b = stores.pop().unwrap();
    let a = stores.pop().unwrap();
    let optim = (optim.len() == 2).then(|| {
        let b = optim.pop().unwrap();
        [optim.pop().unwrap(), b]
    });
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        rng: header.rng,
        history: header.history,
        params: GenConViTParams { a, b },
        optim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use genconvit_core::init_params;

    fn micro_checkpoint(with_optim: bool) -> Checkpoint {
        let mut config = RunConfig::default();
        config.model = ModelConfig::micro();
        let params = init_params::<f32>(&config.model, 4).unwrap();
        let optim = with_optim.then(|| {
            [&params.a, &params.b].map(|s| {
                let mut st = genconvit_core::train::optimizer(s, AdamConfig::default());
                st.step = 7;
                for m in &mut st.m {
                    m.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.25);
                }
                st
            })
        });
        Checkpoint {
            config,
            epoch: 3,
            rng: RngState { seed: 11, next_epoch: 3 },
            // Values that a non-round-trip float parser gets wrong by an ulp.
            history: vec![EpochRow {
                epoch: 1,
                loss_a: 3.1708601832389833,
                loss_b: 2.3632700085639953,
                val_acc: Some(0.5),
                recon_mse: 0.09794366434216499,
            }],
            params,
            optim,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for with_optim in [false, true] {
            let ck = micro_checkpoint(with_optim);
            let (p1, p2) = (dir.path().join("one.ckpt"), dir.path().join("two.ckpt"));
            save_checkpoint(&ck, &p1).unwrap();
            let back = load_checkpoint(&p1).unwrap();
            assert_eq!((&back.config, back.epoch, back.rng, &back.history), (&ck.config, ck.epoch, ck.rng, &ck.history));
            for net in Network::ALL {
                let (x, y) = (back.params.network(net), ck.params.network(net));
                assert_eq!(x.names(), y.names());
                assert!(x.values().zip(y.values()).all(|(u, v)| u == v));
                assert_eq!(x.stats(), y.stats());
            }
            assert_eq!(back.optim, ck.optim);
            save_checkpoint(&back, &p2).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn damaged_files_fail_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&micro_checkpoint(true), &path).unwrap();
        let good = fs::read(&path).unwrap();
        let bad = dir.path().join("bad.ckpt");

        let mut b = good.clone();
        b[0] = b'X';
        fs::write(&bad, &b).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::Version(_))));

        let mut b = good.clone();
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&bad, &b).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::Version(_))));

        for cut in [5, 30, good.len() - 1] {
            fs::write(&bad, &good[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }

        // Same-length rename, so offsets and lengths stay valid.
        let mut b = good.clone();
        let at = find(&b, b"\"a.head.bias\"").unwrap();
        b[at..at + 13].copy_from_slice(b"\"a.head.bia_\"");
        fs::write(&bad, &b).unwrap();
        match load_checkpoint(&bad) {
            Err(CheckpointError::UnknownTensor(name)) => assert_eq!(name, "a.head.bia_"),
            other => panic!("expected unknown tensor, got {other:?}"),
        }
    }

    fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
        hay.windows(needle.len()).position(|w| w == needle)
    }

    #[test]
    fn mismatched_model_lists_offending_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&micro_checkpoint(false), &path).unwrap();
        let mut wider = ModelConfig::micro();
        wider.backbone.head_out = 7;
        match load_checkpoint_as(&path, &wider) {
            Err(CheckpointError::ShapeMismatch(list)) => {
                let names: Vec<&str> = list.iter().map(|m| m.name.as_str()).collect();
                for net in ["a", "b"] {
                    for part in ["img", "lat"] {
                        assert!(names.contains(&format!("{net}.{part}.head.fc.weight").as_str()));
                        assert!(names.contains(&format!("{net}.{part}.head.fc.bias").as_str()));
                    }
                    assert!(names.contains(&format!("{net}.head.weight").as_str()));
                }
                assert_eq!(list.len(), 10);
                let msg = CheckpointError::ShapeMismatch(list).to_string();
                assert!(msg.contains("a.img.head.fc.weight (model [7, 8], file [6, 8])"), "{msg}");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}

//! Checkpoint directories: `manifest.json` plus a `params.bin` blob holding
//! parameters and optimizer moments as little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tape::Mat;
use crate::train::{CachedScores, History, TrainConfig, TrainState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GMCKPT01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Random streams are derived from `(seed, stream, step, index)`, so the
/// seed and the position in training fully determine them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub params_file: String,
    pub params_sha256: String,
    pub adam_t: u64,
    pub vocab_sha256: Option<String>,
    pub train_len: usize,
    /// Present only when scores are reused across steps.
    pub score_cache: Option<Vec<Option<CachedScores>>>,
    pub history: History,
}

pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch-{epoch:04}"))
}

/// The highest-numbered epoch checkpoint under `root`, if any.
pub fn latest(root: &Path) -> Result<Option<PathBuf>> {
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(root, e)),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(n) = name
            .to_str()
            .and_then(|s| s.strip_prefix("epoch-"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_blob(tensors: &[&Mat]) -> Vec<u8> {
    let n: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + n * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for t in tensors {
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_blob(path: &Path, bytes: &[u8], shapes: &[(usize, usize)]) -> Result<Vec<Mat>> {
    let bad = |reason: String| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if bytes.len() != MAGIC.len() + 8 + n * 8 || &bytes[..8] != MAGIC {
        return Err(bad(format!("expected {} values, blob has {} bytes", n, bytes.len())));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if count != n {
        return Err(bad(format!("header lists {count} values, manifest {n}")));
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(shapes
        .iter()
        .map(|&(r, c)| Mat::from_shape_simple_fn((r, c), || values.next().expect("length checked")))
        .collect())
}

/// Writes `state` to `dir`, replacing any previous checkpoint there.
pub fn save(dir: &Path, state: &TrainState, cfg: &TrainConfig, vocab_sha256: Option<&str>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = &state.model.params;
    let mut all: Vec<&Mat> = params.ids().map(|id| params.get(id)).collect();
    all.extend(state.adam.m.iter());
    all.extend(state.adam.v.iter());
    let blob = encode_blob(&all);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step: state.step,
        epoch: state.epoch,
        config: cfg.clone(),
        rng: RngState {
            seed: cfg.seed,
            next_step: state.step,
            next_epoch: state.epoch,
        },
        tensors: params
            .ids()
            .map(|id| TensorEntry {
                name: params.name(id).to_string(),
                rows: params.get(id).nrows(),
                cols: params.get(id).ncols(),
            })
            .collect(),
        params_file: PARAMS_FILE.to_string(),
        params_sha256: sha256_hex(&blob),
        adam_t: state.adam.t,
        vocab_sha256: vocab_sha256.map(str::to_string),
        train_len: state.score_cache.len(),
        score_cache: (cfg.score_every > 1).then(|| state.score_cache.clone()),
        history: state.history.clone(),
    };
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Integrity {
        path: path.clone(),
        reason: format!("unreadable manifest: {e}"),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity {
            path,
            reason: format!("format version {} is not {FORMAT_VERSION}", manifest.format_version),
        });
    }
    Ok(manifest)
}

/// Restores the configuration and training state saved in `dir`.
pub fn load(dir: &Path) -> Result<(TrainConfig, TrainState, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let cfg = manifest.config.clone();
    let path = dir.join(&manifest.params_file);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = sha256_hex(&blob);
    if digest != manifest.params_sha256 {
        return Err(Error::Integrity {
            path,
            reason: format!("sha256 {digest} does not match manifest {}", manifest.params_sha256),
        });
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let ids: Vec<_> = model.params.ids().collect();
    let expected: Vec<TensorEntry> = ids
        .iter()
        .map(|&id| TensorEntry {
            name: model.params.name(id).to_string(),
            rows: model.params.get(id).nrows(),
            cols: model.params.get(id).ncols(),
        })
        .collect();
    if expected != manifest.tensors {
        return Err(Error::Integrity {
            path: dir.join(MANIFEST_FILE),
            reason: "tensor list does not match the configured model".into(),
        });
    }
    let shapes: Vec<(usize, usize)> = expected.iter().map(|t| (t.rows, t.cols)).collect();
    let all_shapes: Vec<(usize, usize)> = shapes.iter().cycle().take(shapes.len() * 3).copied().collect();
    let mut tensors = decode_blob(&path, &blob, &all_shapes)?.into_iter();
    for &id in &ids {
        *model.params.get_mut(id) = tensors.next().expect("decoded");
    }
    let m: Vec<Mat> = tensors.by_ref().take(ids.len()).collect();
    let v: Vec<Mat> = tensors.collect();
    let adam = Adam {
        config: cfg.adam.clone(),
        m,
        v,
        t: manifest.adam_t,
    };
    let score_cache = manifest
        .score_cache
        .clone()
        .unwrap_or_else(|| vec![None; manifest.train_len]);
    let state = TrainState {
        model,
        adam,
        step: manifest.step,
        epoch: manifest.epoch,
        history: manifest.history.clone(),
        score_cache,
    };
    Ok((cfg, state, manifest))
}

/// Loads only the model weights, for evaluation.
pub fn load_model(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let (_, state, manifest) = load(dir)?;
    Ok((state.model, manifest))
}

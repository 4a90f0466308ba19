//! Directory checkpoints: a `meta` JSON file plus one little-endian float32
//! file per named tensor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, IoContext, Result};
use crate::tensor::NamedTensors;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// `encoder`, `moco` or `classifier`.
    pub kind: String,
    pub epoch: u64,
    pub rng_state: RngState,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, epoch: u64, rng_state: RngState, config: serde_json::Value) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            epoch,
            rng_state,
            config,
            extra: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }
}

fn tensor_bytes(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(bytes).at(path)?;
    f.sync_all().at(path)
}

/// Writes `tensors` and `meta` to `dir`, replacing any previous contents
/// only once the new directory is complete.
pub fn write_checkpoint(dir: &Path, mut meta: CheckpointMeta, tensors: &NamedTensors<f32>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Validation(format!("checkpoint path {} has no name", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    if !parent.as_os_str().is_empty() {
        fs::create_dir_all(&parent).at(&parent)?;
    }
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir(&tmp).at(&tmp)?;

    meta.tensors.clear();
    for (tname, t) in tensors {
        let file = format!("{tname}.bin");
        write_file(&tmp.join(&file), &tensor_bytes(t))?;
        meta.tensors.push(TensorEntry { name: tname.clone(), shape: t.shape().to_vec(), file });
    }
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::Format(format!("serializing checkpoint meta: {e}")))?;
    write_file(&tmp.join(META_FILE), &json)?;

    if dir.exists() {
        let old = parent.join(format!(".{name}.old"));
        if old.exists() {
            fs::remove_dir_all(&old).at(&old)?;
        }
        fs::rename(dir, &old).at(dir)?;
        fs::rename(&tmp, dir).at(dir)?;
        fs::remove_dir_all(&old).at(&old)?;
    } else {
        fs::rename(&tmp, dir).at(dir)?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read(&path).at(&path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointMeta, NamedTensors<f32>)> {
    let meta = read_meta(dir)?;
    let mut tensors = NamedTensors::new();
    for entry in &meta.tensors {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(Error::Format(format!("tensor file name {:?} not allowed", entry.file)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).at(&path)?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "{}: {} bytes for shape {:?}",
                path.display(),
                bytes.len(),
                entry.shape
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
        tensors.insert(entry.name.clone(), arr);
    }
    Ok((meta, tensors))
}

/// Tensors under `prefix.` with the prefix removed.
pub fn strip_prefix(tensors: &NamedTensors<f32>, prefix: &str) -> NamedTensors<f32> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// Inserts every tensor of `src` under `prefix.`.
pub fn add_prefixed(dst: &mut NamedTensors<f32>, src: &NamedTensors<f32>, prefix: &str) {
    for (k, v) in src {
        dst.insert(format!("{prefix}.{k}"), v.clone());
    }
}

pub fn save_encoder(dir: &Path, params: &EncoderParams<f32>, epoch: u64, rng: RngState) -> Result<()> {
    let cfg = serde_json::to_value(&params.cfg).expect("config serializes");
    let meta = CheckpointMeta::new("encoder", epoch, rng, serde_json::json!({ "encoder": cfg }));
    write_checkpoint(dir, meta, &params.tensors)
}

/// Loads an encoder from any checkpoint kind: a bare encoder, the query
/// encoder of a pretraining run, or the encoder of a classifier.
pub fn load_encoder(dir: &Path) -> Result<EncoderParams<f32>> {
    let (meta, tensors) = read_checkpoint(dir)?;
    encoder_from(&meta, &tensors, dir)
}

pub(crate) fn encoder_from(
    meta: &CheckpointMeta,
    tensors: &NamedTensors<f32>,
    dir: &Path,
) -> Result<EncoderParams<f32>> {
    let cfg_value = meta
        .config
        .get("encoder")
        .cloned()
        .ok_or_else(|| Error::Format(format!("{}: meta lacks an encoder config", dir.display())))?;
    let cfg: EncoderConfig = serde_json::from_value(cfg_value)
        .map_err(|e| Error::Format(format!("{}: encoder config: {e}", dir.display())))?;
    let own = match meta.kind.as_str() {
        "encoder" => tensors.clone(),
        "moco" => strip_prefix(tensors, "query"),
        "classifier" => strip_prefix(tensors, "encoder"),
        other => return Err(Error::Format(format!("{}: unknown checkpoint kind {other}", dir.display()))),
    };
    EncoderParams::from_tensors(cfg, own, Mode::Train)
}

/// Checkpoint directory for a completed epoch count.
pub fn epoch_dir(root: &Path, epoch: u64) -> PathBuf {
    root.join(format!("epoch_{epoch:04}"))
}

/// Highest-numbered `epoch_NNNN` directory under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root).at(root)? {
        let entry = entry.at(root)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join(META_FILE).is_file() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

//! `STU1` checkpoint files and per-depth model banks.
//!
//! Layout:
//!
//! | bytes | content                                                   |
//! |-------|-----------------------------------------------------------|
//! | 4     | magic `STU1`                                              |
//! | 4     | format version, little-endian u32                         |
//! | 4     | metadata length `N`, little-endian u32                    |
//! | N     | UTF-8 JSON metadata ([`CheckpointHeader`])                |
//! | rest  | little-endian f32 parameters, each layer weight then bias |
//!
//! The metadata carries the SHA-256 of the payload bytes as lowercase hex.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Direction, NormStats, StuNetArch, StuNetModel};
use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerParams, Tensor};

pub const MAGIC: &[u8; 4] = b"STU1";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub weight: Vec<usize>,
    pub bias: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: StuNetArch,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub direction: Direction,
    pub trained_epochs: usize,
    pub param_count: usize,
    pub layers: Vec<LayerShape>,
    pub payload_sha256: String,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn payload(model: &StuNetModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.param_count() * 4);
    for p in &model.params {
        for &v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Serialized checkpoint bytes; identical models give identical bytes.
pub fn to_bytes(model: &StuNetModel) -> Result<Vec<u8>> {
    model.validate()?;
    let body = payload(model);
    let header = CheckpointHeader {
        arch: model.arch,
        norm_stats: model.norm_stats,
        seed: model.seed,
        direction: model.direction,
        trained_epochs: model.trained_epochs,
        param_count: model.param_count(),
        layers: model
            .params
            .iter()
            .map(|p| LayerShape {
                kind: p.kind,
                weight: p.weight.shape().to_vec(),
                bias: p.bias.shape().to_vec(),
                stride: p.stride,
                padding: p.padding,
            })
            .collect(),
        payload_sha256: sha256_hex(&body),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save(model: &StuNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| corrupt(path, format!("missing {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "file shorter than magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "wrong magic"));
    }
    let version = read_u32(r, path, "version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let n = read_u32(r, path, "metadata length")? as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)
        .map_err(|_| corrupt(path, "truncated metadata"))?;
    serde_json::from_slice(&json).map_err(|e| corrupt(path, format!("metadata JSON: {e}")))
}

/// Reads only the metadata block.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header_from(&mut BufReader::new(file), path)
}

pub fn load(path: impl AsRef<Path>) -> Result<StuNetModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r, path)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != header.param_count * 4 {
        return Err(corrupt(
            path,
            format!("payload is {} bytes, expected {}", body.len(), header.param_count * 4),
        ));
    }
    if sha256_hex(&body) != header.payload_sha256 {
        return Err(corrupt(path, "payload hash mismatch"));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(corrupt(path, "layer shapes exceed payload"));
        }
        Tensor::new(shape.to_vec(), data)
    };
    let mut params = Vec::with_capacity(header.layers.len());
    for l in &header.layers {
        params.push(LayerParams {
            kind: l.kind,
            weight: take(&l.weight)?,
            bias: take(&l.bias)?,
            stride: l.stride,
            padding: l.padding,
        });
    }
    let model = StuNetModel {
        arch: header.arch,
        params,
        norm_stats: header.norm_stats,
        seed: header.seed,
        trained_epochs: header.trained_epochs,
        direction: header.direction,
    };
    model
        .validate()
        .map_err(|e| corrupt(path, e.to_string()))?;
    if model.param_count() != header.param_count {
        return Err(corrupt(path, "parameter count does not match metadata"));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub level: usize,
    pub depth_m: f64,
    pub file: String,
}

/// Index of a per-depth model bank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub levels: Vec<BankEntry>,
}

pub fn level_file_name(level: usize) -> String {
    format!("level_{level:03}.stu")
}

/// Writes one checkpoint per level plus `manifest.json` into `dir`.
pub fn save_bank(dir: impl AsRef<Path>, models: &[(usize, f64, &StuNetModel)]) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for &(level, depth_m, model) in models {
        let file = level_file_name(level);
        save(model, dir.join(&file))?;
        manifest.levels.push(BankEntry { level, depth_m, file });
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_bank(dir: impl AsRef<Path>) -> Result<Vec<(BankEntry, StuNetModel)>> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| corrupt(&path, format!("manifest JSON: {e}")))?;
    manifest
        .levels
        .into_iter()
        .map(|entry| {
            let model = load(dir.join(&entry.file))?;
            Ok((entry, model))
        })
        .collect()
}

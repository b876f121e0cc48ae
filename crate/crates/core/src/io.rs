//! On-disk formats: scene directories, split files, band stats, checkpoint
//! containers, masks, and float rasters. All writers are deterministic
//! functions of their inputs so write -> read -> write round-trips are
//! byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fcd_tensor::params::ParamSet;

use crate::data::{BandStats, Scene, SplitAssignment};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FCDCKPT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: json: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.into() }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fs_err(path))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(fs_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

// ---- scene directories ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub id: String,
    pub biome: Option<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub byte_order: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_stats: Option<Vec<(f32, f32)>>,
}

/// Write a scene directory: meta.json, bands.bin (C*H*W f32 LE, band-major
/// row-major), and labels.bin (H*W u8 raw 4-class values) when labels exist.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let meta = SceneMeta {
        id: scene.id.clone(),
        biome: scene.biome.clone(),
        channels: scene.channels,
        height: scene.height,
        width: scene.width,
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        band_stats: None,
    };
    write_json(&dir.join("meta.json"), &meta)?;

    let bands_path = dir.join("bands.bin");
    let mut bytes = Vec::with_capacity(scene.bands.len() * 4);
    for v in &scene.bands {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bands_path, bytes).map_err(fs_err(&bands_path))?;

    if let Some(raw) = &scene.raw_labels {
        let labels_path = dir.join("labels.bin");
        fs::write(&labels_path, raw).map_err(fs_err(&labels_path))?;
    }
    Ok(())
}

/// Load a scene directory; labels are merged to binary at load time, with
/// the raw values retained for round-tripping. Rejections name the offending
/// field.
pub fn load_scene(dir: &Path) -> Result<Scene, IoError> {
    let meta_path = dir.join("meta.json");
    let meta: SceneMeta = read_json(&meta_path)?;
    if meta.dtype != "float32" {
        return Err(format_err(&meta_path, format!("dtype: expected float32, got {}", meta.dtype)));
    }
    if meta.byte_order != "little-endian" {
        return Err(format_err(
            &meta_path,
            format!("byte_order: expected little-endian, got {}", meta.byte_order),
        ));
    }
    let bands_path = dir.join("bands.bin");
    let bytes = fs::read(&bands_path).map_err(fs_err(&bands_path))?;
    let expected = meta.channels * meta.height * meta.width * 4;
    if bytes.len() != expected {
        return Err(format_err(
            &bands_path,
            format!("bands: expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    let bands: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let labels_path = dir.join("labels.bin");
    let raw_labels = if labels_path.exists() {
        let raw = fs::read(&labels_path).map_err(fs_err(&labels_path))?;
        if raw.len() != meta.height * meta.width {
            return Err(format_err(
                &labels_path,
                format!("labels: expected {} bytes, got {}", meta.height * meta.width, raw.len()),
            ));
        }
        Some(raw)
    } else {
        None
    };

    Scene::new(
        meta.id,
        meta.biome,
        meta.channels,
        meta.height,
        meta.width,
        bands,
        raw_labels,
        None,
    )
    .map_err(IoError::from)
}

// ---- splits and band stats ----

pub fn write_splits(path: &Path, splits: &SplitAssignment) -> Result<(), IoError> {
    write_json(path, splits)
}

pub fn read_splits(path: &Path) -> Result<SplitAssignment, IoError> {
    read_json(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStatsFile {
    pub stats: Vec<(f32, f32)>,
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub source_split: String,
}

pub fn write_band_stats(path: &Path, file: &BandStatsFile) -> Result<(), IoError> {
    write_json(path, file)
}

pub fn read_band_stats(path: &Path) -> Result<(BandStats, BandStatsFile), IoError> {
    let file: BandStatsFile = read_json(path)?;
    Ok((BandStats(file.stats.clone()), file))
}

// ---- checkpoints ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Self-describing checkpoint header; the binary body carries the parameter
/// blobs in header order as raw f32 little-endian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub kind: String,
    pub iteration: u64,
    pub val_f1: Option<f64>,
    pub config_echo: serde_json::Value,
    pub params: Vec<ParamHeader>,
}

pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    iteration: u64,
    val_f1: Option<f64>,
    config_echo: serde_json::Value,
    params: &ParamSet,
) -> Result<(), IoError> {
    let header = CheckpointHeader {
        format: "fcd-checkpoint-v1".into(),
        kind: kind.into(),
        iteration,
        val_f1,
        config_echo,
        params: params
            .entries()
            .iter()
            .map(|e| ParamHeader { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fs_err(path))?;
    }
    let mut f = fs::File::create(path).map_err(fs_err(path))?;
    f.write_all(CHECKPOINT_MAGIC).map_err(fs_err(path))?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(fs_err(path))?;
    f.write_all(&header_bytes).map_err(fs_err(path))?;
    for e in params.entries() {
        let mut blob = Vec::with_capacity(e.data.len() * 4);
        for v in &e.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&blob).map_err(fs_err(path))?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet), IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(format_err(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    if header.format != "fcd-checkpoint-v1" {
        return Err(format_err(path, format!("unsupported format {}", header.format)));
    }
    let mut params = ParamSet::new();
    let mut offset = header_end;
    for p in &header.params {
        let count: usize = p.shape.iter().product();
        let end = offset + count * 4;
        if bytes.len() < end {
            return Err(format_err(path, format!("truncated blob for {}", p.name)));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.register(&p.name, &p.shape, data);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_err(path, "trailing bytes after parameter blobs"));
    }
    Ok((header, params))
}

// ---- masks and rasters ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub method: String,
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub threshold: Option<f64>,
    pub checkpoint: String,
}

/// mask.bin (u8 H*W) plus record.json alongside.
pub fn write_mask(dir: &Path, record: &MaskRecord, mask: &[u8]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    if mask.len() != record.height * record.width {
        return Err(format_err(dir, "mask length does not match record dims"));
    }
    let bin = dir.join("mask.bin");
    fs::write(&bin, mask).map_err(fs_err(&bin))?;
    write_json(&dir.join("record.json"), record)
}

pub fn read_mask(dir: &Path) -> Result<(MaskRecord, Vec<u8>), IoError> {
    let record: MaskRecord = read_json(&dir.join("record.json"))?;
    let bin = dir.join("mask.bin");
    let mask = fs::read(&bin).map_err(fs_err(&bin))?;
    if mask.len() != record.height * record.width {
        return Err(format_err(&bin, "mask length does not match record dims"));
    }
    Ok((record, mask))
}

/// Raw f32 LE raster (used for stitched difference maps).
pub fn write_f32_raster(path: &Path, values: &[f32]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(fs_err(path))?;
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(fs_err(path))
}

pub fn read_f32_raster(path: &Path, expected_len: usize) -> Result<Vec<f32>, IoError> {
    let bytes = fs::read(path).map_err(fs_err(path))?;
    if bytes.len() != expected_len * 4 {
        return Err(format_err(
            path,
            format!("expected {} bytes, got {}", expected_len * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

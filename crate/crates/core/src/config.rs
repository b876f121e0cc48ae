//! Declarative run configuration: TOML file + `--set key=value` overrides,
//! validated up front, hashed for provenance. Defaults are the full-scale
//! training recipe; desk-scale runs override the sizes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cam::CamTrainConfig;
use crate::data::SynthSpec;
use crate::gan::GanTrainConfig;
use crate::refine::{FinetuneConfig, RefineConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("override `{key}`: {message}")]
    OverrideApply { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub patch_size: usize,
    /// Percentiles over the training split that define per-band (lo, hi).
    pub stats_lo_pct: f64,
    pub stats_hi_pct: f64,
    /// Patches with more nodata than this are dropped from training sets.
    pub drop_nodata_over: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { patch_size: 128, stats_lo_pct: 1.0, stats_hi_pct: 99.0, drop_nodata_over: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratio: (u32, u32, u32),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratio: (6, 2, 4), seed: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Grid resolution of the threshold sweep.
    pub grid_points: usize,
    /// Use known image-level labels during pseudo-labeling (clear patches
    /// get empty masks); test-time inference never uses labels.
    pub use_image_labels: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { grid_points: 256, use_image_labels: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_root: Option<PathBuf>,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub gan: GanTrainConfig,
    pub mask: MaskConfig,
    pub cam: CamTrainConfig,
    pub refine: RefineConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Read { path: p.into(), source })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Parse { path: p.into(), message: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| ConfigError::Parse {
                path: path.map(Path::to_path_buf).unwrap_or_else(|| "<overrides>".into()),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rewrite every stage seed deterministically from one master seed.
    pub fn set_master_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.split.seed = seed.wrapping_add(1);
        self.gan.seed = seed.wrapping_add(2);
        self.cam.seed = seed.wrapping_add(3);
        self.refine.seed = seed.wrapping_add(4);
        self.finetune.seed = seed.wrapping_add(5);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        if self.data.patch_size == 0 || !self.data.patch_size.is_multiple_of(8) {
            return Err(invalid(format!(
                "data.patch_size = {} must be a positive multiple of 8",
                self.data.patch_size
            )));
        }
        let seg_factor = 1usize << (self.refine.depth.max(1) - 1);
        if !self.data.patch_size.is_multiple_of(seg_factor) {
            return Err(invalid(format!(
                "data.patch_size = {} must be divisible by 2^(refine.depth-1) = {}",
                self.data.patch_size, seg_factor
            )));
        }
        if !(self.data.stats_lo_pct >= 0.0
            && self.data.stats_hi_pct <= 100.0
            && self.data.stats_lo_pct < self.data.stats_hi_pct)
        {
            return Err(invalid("data stats percentiles must satisfy 0 <= lo < hi <= 100".into()));
        }
        if !(0.0..=1.0).contains(&self.data.drop_nodata_over) {
            return Err(invalid("data.drop_nodata_over must be in [0,1]".into()));
        }
        if self.split.ratio.0 + self.split.ratio.1 + self.split.ratio.2 == 0 {
            return Err(invalid("split.ratio must have a positive total".into()));
        }
        self.synth.validate().map_err(|e| invalid(e.to_string()))?;
        self.gan.validate().map_err(|e| invalid(e.to_string()))?;
        self.refine.validate().map_err(|e| invalid(e.to_string()))?;
        if self.mask.grid_points == 0 {
            return Err(invalid("mask.grid_points must be positive".into()));
        }
        if self.cam.epochs == 0 || self.cam.batch_size == 0 || self.cam.base_width == 0 {
            return Err(invalid("cam.epochs/batch_size/base_width must be positive".into()));
        }
        if !(self.finetune.label_fraction > 0.0 && self.finetune.label_fraction <= 1.0) {
            return Err(invalid(format!(
                "finetune.label_fraction = {} outside (0,1]",
                self.finetune.label_fraction
            )));
        }
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 {
            return Err(invalid("finetune.epochs/batch_size must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seeds(&self) -> std::collections::BTreeMap<String, u64> {
        [
            ("synth".to_string(), self.synth.seed),
            ("split".to_string(), self.split.seed),
            ("gan".to_string(), self.gan.seed),
            ("cam".to_string(), self.cam.seed),
            ("refine".to_string(), self.refine.seed),
            ("finetune".to_string(), self.finetune.seed),
        ]
        .into_iter()
        .collect()
    }
}

/// Apply one `a.b.c=value` override onto the raw TOML table.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let Some((key, raw_value)) = item.split_once('=') else {
        return Err(ConfigError::BadOverride(item.to_string()));
    };
    let key = key.trim();
    let raw_value = raw_value.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(item.to_string()));
    }
    // Parse the value with TOML semantics; bare words fall back to strings.
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let mut node = table;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| ConfigError::OverrideApply {
            key: key.to_string(),
            message: format!("`{part}` is not a table"),
        })?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_scale_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.gan.iterations, 200_000);
        assert_eq!(cfg.gan.batch_size, 16);
        assert_eq!(cfg.gan.weights.lambda_cls, 1.0);
        assert_eq!(cfg.gan.weights.lambda_cyc, 10.0);
        assert_eq!(cfg.gan.weights.lambda_id, 10.0);
        assert_eq!(cfg.data.patch_size, 128);
        assert_eq!(cfg.refine.epochs, 30);
        assert_eq!(cfg.refine.batch_size, 64);
        assert_eq!(cfg.refine.lr, 1e-4);
        assert_eq!(cfg.refine.patience, 3);
        assert_eq!(cfg.refine.lr_drop_factor, 10.0);
        assert_eq!(cfg.finetune.label_fraction, 0.01);
        assert_eq!(cfg.finetune.lr, 1e-5);
        assert!(cfg.finetune.freeze_encoder);
        assert_eq!(cfg.split.ratio, (6, 2, 4));
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "gan.iterations=500".into(),
                "gan.weights.lambda_cyc=5.0".into(),
                "data.patch_size=32".into(),
                "refine.depth=3".into(),
                "mask.use_image_labels=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.gan.iterations, 500);
        assert_eq!(cfg.gan.weights.lambda_cyc, 5.0);
        assert_eq!(cfg.data.patch_size, 32);
        assert!(!cfg.mask.use_image_labels);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::load(None, &["gan.not_a_field=1".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not_a_field") || msg.contains("unknown"), "{msg}");
        let err = RunConfig::load(None, &["bogus_section.x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus_section"), "{err}");
    }

    #[test]
    fn bad_override_shapes_rejected() {
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
        assert!(RunConfig::load(None, &["=5".into()]).is_err());
    }

    #[test]
    fn validation_catches_incoherent_sizes() {
        let err = RunConfig::load(None, &["data.patch_size=20".into()]).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{err}");
        // depth 5 needs divisibility by 16: 24 fails
        let err = RunConfig::load(None, &["data.patch_size=24".into()]).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        let err = RunConfig::load(None, &["finetune.label_fraction=0.0".into()]).unwrap_err();
        assert!(err.to_string().contains("label_fraction"), "{err}");
    }

    #[test]
    fn hash_tracks_content_not_identity() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::load(None, &["gan.iterations=7".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn master_seed_rewrites_stage_seeds() {
        let mut cfg = RunConfig::default();
        cfg.set_master_seed(1000);
        let seeds = cfg.stage_seeds();
        assert_eq!(seeds["synth"], 1000);
        assert_eq!(seeds["gan"], 1002);
        let mut cfg2 = RunConfig::default();
        cfg2.set_master_seed(1000);
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn toml_file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
[data]
patch_size = 32

[gan]
iterations = 100
batch_size = 4
base_width = 8
res_blocks = 2

[refine]
depth = 2

[synth]
num_scenes = 6
scene_size = [64, 64]
channels = 3
cloud_density = 0.3
alpha_threshold = 0.4
seed = 9
"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.gan.iterations, 100);
        assert_eq!(cfg.synth.num_scenes, 6);
        assert_eq!(cfg.synth.scene_size, (64, 64));
        // untouched sections keep defaults
        assert_eq!(cfg.finetune.label_fraction, 0.01);
    }
}

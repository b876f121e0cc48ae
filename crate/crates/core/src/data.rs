//! Scene and patch domain types: ingestion-side invariants, normalization,
//! tiling with reflect padding, image-level label derivation, and
//! biome-stratified split assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fcd_tensor::rng::Rng;

pub const DEFAULT_PATCH_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene {id}: {field}: {message}")]
    InvalidScene { id: String, field: String, message: String },
    #[error("band {band}: invalid stats lo={lo} hi={hi} (need lo < hi, finite)")]
    InvalidBandStats { band: usize, lo: f32, hi: f32 },
    #[error("band stats cover {got} bands, scene has {want}")]
    BandStatsMismatch { got: usize, want: usize },
    #[error("scene {id} is {h}x{w}, smaller than patch size {patch}")]
    SceneTooSmall { id: String, h: usize, w: usize, patch: usize },
    #[error("pixel mask contains value {value}; expected 0/1")]
    NonBinaryMask { value: u8 },
    #[error("domain label must be 0 or 1, got {0}")]
    BadDomainLabel(u8),
    #[error("no scenes to split")]
    EmptySplitInput,
}

/// Binary translation condition: 0 = clear, 1 = cloudy.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainLabel(u8);

impl DomainLabel {
    pub const CLEAR: DomainLabel = DomainLabel(0);
    pub const CLOUDY: DomainLabel = DomainLabel(1);

    pub fn new(value: u8) -> Result<Self, DataError> {
        if value <= 1 {
            Ok(DomainLabel(value))
        } else {
            Err(DataError::BadDomainLabel(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_cloudy(self) -> bool {
        self.0 == 1
    }
}

/// A multiband raster with optional pixel ground truth.
///
/// `bands` is band-major `[C][H][W]`. `raw_labels` keeps the on-disk 4-class
/// values (clear/thin-cloud/cloud/shadow) so files round-trip byte-exactly;
/// `pixel_labels` is the merged binary view all downstream code consumes.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub biome: Option<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bands: Vec<f32>,
    pub raw_labels: Option<Vec<u8>>,
    pub pixel_labels: Option<Vec<u8>>,
    pub nodata_mask: Option<Vec<bool>>,
}

/// Raw 4-class labels: 0 clear, 1 thin cloud, 2 cloud, 3 shadow.
/// Thin cloud joins cloud; shadow joins clear.
pub fn merge_raw_labels(raw: &[u8]) -> Result<Vec<u8>, DataError> {
    raw.iter()
        .map(|&v| match v {
            0 | 3 => Ok(0),
            1 | 2 => Ok(1),
            other => Err(DataError::InvalidScene {
                id: String::new(),
                field: "labels".into(),
                message: format!("raw label value {other} out of range 0..=3"),
            }),
        })
        .collect()
}

impl Scene {
    /// Construct with invariant checks; `raw_labels` are merged to binary.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        biome: Option<String>,
        channels: usize,
        height: usize,
        width: usize,
        bands: Vec<f32>,
        raw_labels: Option<Vec<u8>>,
        nodata_mask: Option<Vec<bool>>,
    ) -> Result<Self, DataError> {
        let fail = |field: &str, message: String| DataError::InvalidScene {
            id: id.clone(),
            field: field.into(),
            message,
        };
        if channels == 0 {
            return Err(fail("channels", "need at least one band".into()));
        }
        if bands.len() != channels * height * width {
            return Err(fail(
                "bands",
                format!("expected {} values, got {}", channels * height * width, bands.len()),
            ));
        }
        if let Some(pos) = bands.iter().position(|v| !v.is_finite()) {
            let band = pos / (height * width);
            return Err(fail("bands", format!("non-finite value in band {band}")));
        }
        if let Some(raw) = &raw_labels {
            if raw.len() != height * width {
                return Err(fail(
                    "labels",
                    format!("expected {} values, got {}", height * width, raw.len()),
                ));
            }
        }
        if let Some(mask) = &nodata_mask {
            if mask.len() != height * width {
                return Err(fail("nodata_mask", "shape mismatch with scene".into()));
            }
        }
        let pixel_labels = match &raw_labels {
            Some(raw) => Some(merge_raw_labels(raw).map_err(|e| match e {
                DataError::InvalidScene { field, message, .. } => DataError::InvalidScene {
                    id: id.clone(),
                    field,
                    message,
                },
                other => other,
            })?),
            None => None,
        };
        Ok(Scene {
            id,
            biome,
            channels,
            height,
            width,
            bands,
            raw_labels,
            pixel_labels,
            nodata_mask,
        })
    }

    pub fn band(&self, c: usize) -> &[f32] {
        &self.bands[c * self.height * self.width..(c + 1) * self.height * self.width]
    }
}

/// Per-band (lo, hi) used to map reflectance into [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats(pub Vec<(f32, f32)>);

impl BandStats {
    pub fn validate(&self, channels: usize) -> Result<(), DataError> {
        if self.0.len() != channels {
            return Err(DataError::BandStatsMismatch { got: self.0.len(), want: channels });
        }
        for (band, &(lo, hi)) in self.0.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DataError::InvalidBandStats { band, lo, hi });
            }
        }
        Ok(())
    }
}

/// Percentile-based band stats over a set of scenes (typically the training
/// split, computed once and frozen).
pub fn compute_band_stats(scenes: &[&Scene], lo_pct: f64, hi_pct: f64) -> Result<BandStats, DataError> {
    let Some(first) = scenes.first() else {
        return Err(DataError::EmptySplitInput);
    };
    let channels = first.channels;
    let mut stats = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut values: Vec<f32> = scenes.iter().flat_map(|s| s.band(c).iter().copied()).collect();
        values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = percentile(&values, lo_pct);
        let mut hi = percentile(&values, hi_pct);
        if hi <= lo {
            hi = lo + 1e-6;
        }
        stats.push((lo, hi));
    }
    Ok(BandStats(stats))
}

fn percentile(sorted: &[f32], pct: f64) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (sorted.len() - 1) as f64 * (pct / 100.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = (pos - lo as f64) as f32;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Affine map of each band from [lo, hi] to [-1, 1], clamped.
pub fn normalize_bands(scene: &Scene, stats: &BandStats) -> Result<Scene, DataError> {
    stats.validate(scene.channels)?;
    let plane = scene.height * scene.width;
    let mut bands = Vec::with_capacity(scene.bands.len());
    for c in 0..scene.channels {
        let (lo, hi) = stats.0[c];
        let scale = 2.0 / (hi - lo);
        bands.extend(
            scene.bands[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| ((v - lo) * scale - 1.0).clamp(-1.0, 1.0)),
        );
    }
    Ok(Scene { bands, ..scene.clone() })
}

/// Returns cloudy iff the mask has at least one cloud pixel.
pub fn derive_image_label(pixel_mask: &[u8]) -> DomainLabel {
    if pixel_mask.iter().any(|&v| v != 0) {
        DomainLabel::CLOUDY
    } else {
        DomainLabel::CLEAR
    }
}

/// Reflect padding recorded for a patch or a whole tiling (bottom/right only).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadInfo {
    pub bottom: usize,
    pub right: usize,
}

/// A fixed-size normalized tile with an image-level label.
#[derive(Clone, Debug)]
pub struct Patch {
    pub scene_id: String,
    pub biome: Option<String>,
    pub origin: (usize, usize),
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
    pub image_label: DomainLabel,
    pub pixel_mask: Option<Vec<u8>>,
    pub pad: PadInfo,
}

#[derive(Clone, Copy, Debug)]
pub struct TileOptions {
    /// Drop patches whose nodata fraction exceeds this (dataset-building
    /// mode). `None` keeps every tile (inference mode, so stitching covers
    /// the full scene).
    pub drop_nodata_over: Option<f32>,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions { drop_nodata_over: Some(0.5) }
    }
}

#[derive(Clone, Debug)]
pub struct Tiling {
    pub patches: Vec<Patch>,
    pub pad: PadInfo,
    pub grid: (usize, usize),
    pub dropped: Vec<(usize, usize)>,
}

/// Reflect index for bottom/right padding (no edge duplication).
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 2 - i
    }
}

/// Non-overlapping grid tiling. Scenes whose extent is not a multiple of
/// `patch_size` are reflect-padded up to the next multiple; the pad widths
/// are recorded on every patch touching the padded border.
pub fn tile_scene(scene: &Scene, patch_size: usize, opts: TileOptions) -> Result<Tiling, DataError> {
    if scene.height < patch_size || scene.width < patch_size {
        return Err(DataError::SceneTooSmall {
            id: scene.id.clone(),
            h: scene.height,
            w: scene.width,
            patch: patch_size,
        });
    }
    let padded_h = scene.height.div_ceil(patch_size) * patch_size;
    let padded_w = scene.width.div_ceil(patch_size) * patch_size;
    let pad = PadInfo { bottom: padded_h - scene.height, right: padded_w - scene.width };
    let rows = padded_h / patch_size;
    let cols = padded_w / patch_size;

    let mut patches = Vec::with_capacity(rows * cols);
    let mut dropped = Vec::new();
    for gr in 0..rows {
        for gc in 0..cols {
            let origin = (gr * patch_size, gc * patch_size);
            let mut data = Vec::with_capacity(scene.channels * patch_size * patch_size);
            for c in 0..scene.channels {
                let band = scene.band(c);
                for py in 0..patch_size {
                    let sy = reflect(origin.0 + py, scene.height);
                    for px in 0..patch_size {
                        let sx = reflect(origin.1 + px, scene.width);
                        data.push(band[sy * scene.width + sx]);
                    }
                }
            }
            let pixel_mask = scene.pixel_labels.as_ref().map(|labels| {
                let mut mask = Vec::with_capacity(patch_size * patch_size);
                for py in 0..patch_size {
                    let sy = reflect(origin.0 + py, scene.height);
                    for px in 0..patch_size {
                        let sx = reflect(origin.1 + px, scene.width);
                        mask.push(labels[sy * scene.width + sx]);
                    }
                }
                mask
            });
            if let Some(limit) = opts.drop_nodata_over {
                if let Some(nodata) = &scene.nodata_mask {
                    let mut count = 0usize;
                    for py in 0..patch_size {
                        let sy = reflect(origin.0 + py, scene.height);
                        for px in 0..patch_size {
                            let sx = reflect(origin.1 + px, scene.width);
                            if nodata[sy * scene.width + sx] {
                                count += 1;
                            }
                        }
                    }
                    if count as f32 / (patch_size * patch_size) as f32 > limit {
                        dropped.push(origin);
                        continue;
                    }
                }
            }
            let image_label = pixel_mask
                .as_ref()
                .map(|m| derive_image_label(m))
                .unwrap_or(DomainLabel::CLEAR);
            let patch_pad = PadInfo {
                bottom: (origin.0 + patch_size).saturating_sub(scene.height),
                right: (origin.1 + patch_size).saturating_sub(scene.width),
            };
            patches.push(Patch {
                scene_id: scene.id.clone(),
                biome: scene.biome.clone(),
                origin,
                channels: scene.channels,
                size: patch_size,
                data,
                image_label,
                pixel_mask,
                pad: patch_pad,
            });
        }
    }
    Ok(Tiling { patches, pad, grid: (rows, cols), dropped })
}

/// Scene-id assignment to train/val/test, stratified per biome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratio: (u32, u32, u32),
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Shuffle each biome's scenes and split by the ratio using largest-remainder
/// rounding (12 scenes at 6:2:4 gives exactly 6/2/4). Biomes with fewer
/// scenes than ratio parts fall back proportionally and record a warning.
pub fn assign_splits(
    scenes: &[(String, Option<String>)],
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    if scenes.is_empty() {
        return Err(DataError::EmptySplitInput);
    }
    let mut by_biome: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, biome) in scenes {
        by_biome
            .entry(biome.clone().unwrap_or_else(|| "unknown".into()))
            .or_default()
            .push(id.clone());
    }
    let parts_total = (ratio.0 + ratio.1 + ratio.2) as usize;
    let mut rng = Rng::seed_from(seed);
    let mut out = SplitAssignment {
        train: vec![],
        val: vec![],
        test: vec![],
        ratio,
        seed,
        warnings: vec![],
    };
    for (biome, mut ids) in by_biome {
        ids.sort();
        rng.shuffle(&mut ids);
        let n = ids.len();
        if n < parts_total {
            out.warnings.push(format!(
                "biome {biome}: {n} scene(s) < ratio total {parts_total}; proportional fallback"
            ));
        }
        let counts = largest_remainder(n, &[ratio.0 as usize, ratio.1 as usize, ratio.2 as usize]);
        let (a, b) = (counts[0], counts[0] + counts[1]);
        out.train.extend_from_slice(&ids[..a]);
        out.val.extend_from_slice(&ids[a..b]);
        out.test.extend_from_slice(&ids[b..]);
    }
    Ok(out)
}

fn largest_remainder(n: usize, parts: &[usize]) -> Vec<usize> {
    let total: usize = parts.iter().sum();
    let mut counts: Vec<usize> = parts.iter().map(|&p| n * p / total).collect();
    let mut rema: Vec<(usize, usize)> = parts
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, (n * p) % total))
        .collect();
    // Larger remainder first; ties resolve toward earlier parts (train first).
    rema.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut leftover = n - counts.iter().sum::<usize>();
    for (i, _) in rema {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Synthetic corpus specification; ground truth is exact by construction:
/// a pixel is cloud iff its cloud alpha exceeds `alpha_threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_scenes: usize,
    pub scene_size: (usize, usize),
    pub channels: usize,
    pub cloud_density: f32,
    pub alpha_threshold: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_scenes: 60,
            scene_size: (256, 256),
            channels: 3,
            cloud_density: 0.25,
            alpha_threshold: 0.35,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |field: &str, message: String| DataError::InvalidScene {
            id: "<synth-spec>".into(),
            field: field.into(),
            message,
        };
        if self.num_scenes == 0 {
            return Err(bad("num_scenes", "must be positive".into()));
        }
        if self.channels == 0 {
            return Err(bad("channels", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_density) {
            return Err(bad("cloud_density", format!("{} outside [0,1]", self.cloud_density)));
        }
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold < 1.0) {
            return Err(bad("alpha_threshold", format!("{} outside (0,1)", self.alpha_threshold)));
        }
        Ok(())
    }
}

//! From a trained generator to pixel masks: clear translation, difference
//! maps, threshold selection on validation, binarization, and scene
//! stitching. The threshold sweep here is the single implementation shared
//! by the GAN path and the CAM baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PadInfo, Patch};
use crate::eval::{confusion, f1_accuracy, Confusion};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("shape mismatch: x has {x} values, y has {y}")]
    ShapeMismatch { x: usize, y: usize },
    #[error("empty validation set")]
    EmptyValidation,
    #[error("validation patch {0} has no pixel ground truth")]
    MissingTruth(String),
    #[error("threshold grid is empty or not ascending")]
    BadGrid,
    #[error("stitch: missing tiles at {0:?}")]
    MissingTiles(Vec<(usize, usize)>),
    #[error("stitch: duplicate tile at {0:?}")]
    DuplicateTile((usize, usize)),
    #[error("stitch: unexpected tile at {0:?} for grid {1}x{2}")]
    UnexpectedTile((usize, usize), usize, usize),
    #[error("stitch: tile at {origin:?} has {got} values, expected {want}")]
    BadTile { origin: (usize, usize), got: usize, want: usize },
}

/// Anything that can produce the clear translation G(x, 0) of a patch.
pub trait ClearTranslator {
    fn translate_to_clear(&self, data: &[f32], channels: usize, size: usize) -> Vec<f32>;
}

impl<F> ClearTranslator for F
where
    F: Fn(&[f32], usize, usize) -> Vec<f32>,
{
    fn translate_to_clear(&self, data: &[f32], channels: usize, size: usize) -> Vec<f32> {
        self(data, channels, size)
    }
}

/// Per-pixel mean absolute channel difference; non-negative by construction.
#[derive(Clone, Debug)]
pub struct DifferenceMap {
    pub values: Vec<f32>,
    pub size: usize,
    pub source: String,
}

pub fn translate_to_clear<T: ClearTranslator>(translator: &T, patch: &Patch) -> Vec<f32> {
    translator.translate_to_clear(&patch.data, patch.channels, patch.size)
}

pub fn difference_map(
    x: &[f32],
    y: &[f32],
    channels: usize,
    size: usize,
    source: &str,
) -> Result<DifferenceMap, MaskError> {
    if x.len() != y.len() || x.len() != channels * size * size {
        return Err(MaskError::ShapeMismatch { x: x.len(), y: y.len() });
    }
    let plane = size * size;
    let mut values = vec![0.0f32; plane];
    for c in 0..channels {
        let xb = &x[c * plane..(c + 1) * plane];
        let yb = &y[c * plane..(c + 1) * plane];
        for i in 0..plane {
            values[i] += (xb[i] - yb[i]).abs();
        }
    }
    let inv = 1.0 / channels as f32;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(DifferenceMap { values, size, source: source.to_string() })
}

/// mask = (values > threshold), strictly.
pub fn binarize(dm: &DifferenceMap, threshold: f32) -> Vec<u8> {
    dm.values.iter().map(|&v| u8::from(v > threshold)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub lo: f32,
    pub hi: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub threshold: f32,
    pub f1: f64,
    pub sweep: Vec<(f32, f64)>,
    pub grid: GridSpec,
}

/// Uniform grid spanning [0, max(scores)] inclusive.
pub fn uniform_grid(max_score: f32, points: usize) -> Vec<f32> {
    let points = points.max(1);
    let hi = max_score.max(0.0);
    if points == 1 || hi == 0.0 {
        return vec![0.0];
    }
    (0..points).map(|i| hi * i as f32 / (points - 1) as f32).collect()
}

/// A per-pixel score map paired with binary ground truth.
pub struct ScoredMap<'a> {
    pub scores: &'a [f32],
    pub truth: &'a [u8],
}

/// Micro-averaged-F1 argmax over an ascending grid; ties break toward the
/// smaller threshold. Used for difference maps and activation maps alike.
pub fn select_threshold_maps(
    maps: &[ScoredMap<'_>],
    grid: &[f32],
) -> Result<ThresholdSelection, MaskError> {
    if maps.is_empty() {
        return Err(MaskError::EmptyValidation);
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(MaskError::BadGrid);
    }
    for m in maps {
        if m.scores.len() != m.truth.len() {
            return Err(MaskError::ShapeMismatch { x: m.scores.len(), y: m.truth.len() });
        }
    }
    let mut sweep = Vec::with_capacity(grid.len());
    let mut best: Option<(f32, f64)> = None;
    for &t in grid {
        let mut pooled = Confusion::default();
        for m in maps {
            let pred: Vec<u8> = m.scores.iter().map(|&s| u8::from(s > t)).collect();
            pooled.merge(&confusion(&pred, m.truth, None).expect("checked shapes"));
        }
        let (f1, _) = f1_accuracy(&pooled).map_err(|_| MaskError::EmptyValidation)?;
        sweep.push((t, f1));
        let better = match best {
            None => true,
            Some((_, bf1)) => f1 > bf1,
        };
        if better {
            best = Some((t, f1));
        }
    }
    let (threshold, f1) = best.expect("non-empty grid");
    Ok(ThresholdSelection {
        threshold,
        f1,
        sweep,
        grid: GridSpec { points: grid.len(), lo: grid[0], hi: *grid.last().unwrap() },
    })
}

/// Threshold selection for a generator: difference maps of the cloudy
/// validation patches against their pixel ground truth, swept over a uniform
/// grid spanning the observed range.
pub fn select_threshold<T: ClearTranslator>(
    translator: &T,
    val_cloudy: &[&Patch],
    grid_points: usize,
) -> Result<ThresholdSelection, MaskError> {
    if val_cloudy.is_empty() {
        return Err(MaskError::EmptyValidation);
    }
    let mut dms = Vec::with_capacity(val_cloudy.len());
    for p in val_cloudy {
        if p.pixel_mask.is_none() {
            return Err(MaskError::MissingTruth(format!("{}@{:?}", p.scene_id, p.origin)));
        }
        let y = translate_to_clear(translator, p);
        let dm = difference_map(&p.data, &y, p.channels, p.size, &p.scene_id)?;
        dms.push(dm);
    }
    let max_score = dms
        .iter()
        .flat_map(|d| d.values.iter())
        .cloned()
        .fold(0.0f32, f32::max);
    let grid = uniform_grid(max_score, grid_points);
    let maps: Vec<ScoredMap<'_>> = dms
        .iter()
        .zip(val_cloudy)
        .map(|(d, p)| ScoredMap { scores: &d.values, truth: p.pixel_mask.as_deref().unwrap() })
        .collect();
    select_threshold_maps(&maps, &grid)
}

/// Pseudo-labeling path: patches known to be clear get an all-zero mask when
/// `use_image_labels` is set (labels are unknown at test time, where every
/// patch goes through the generator).
pub fn predict_patch_mask<T: ClearTranslator>(
    translator: &T,
    patch: &Patch,
    threshold: f32,
    use_image_labels: bool,
) -> Result<Vec<u8>, MaskError> {
    if use_image_labels && !patch.image_label.is_cloudy() {
        return Ok(vec![0u8; patch.size * patch.size]);
    }
    let y = translate_to_clear(translator, patch);
    let dm = difference_map(&patch.data, &y, patch.channels, patch.size, &patch.scene_id)?;
    Ok(binarize(&dm, threshold))
}

/// Place tiles on the padded grid and crop the reflect padding away. Every
/// padded-grid cell must be covered exactly once.
pub fn stitch_tiles<V: Copy + Default>(
    tiles: &[((usize, usize), &[V])],
    patch_size: usize,
    scene_h: usize,
    scene_w: usize,
) -> Result<Vec<V>, MaskError> {
    let rows = scene_h.div_ceil(patch_size);
    let cols = scene_w.div_ceil(patch_size);
    let padded_h = rows * patch_size;
    let padded_w = cols * patch_size;

    let mut seen = vec![false; rows * cols];
    let mut padded = vec![V::default(); padded_h * padded_w];
    for ((oy, ox), values) in tiles {
        if oy % patch_size != 0 || ox % patch_size != 0 || *oy >= padded_h || *ox >= padded_w {
            return Err(MaskError::UnexpectedTile((*oy, *ox), rows, cols));
        }
        let cell = (oy / patch_size) * cols + ox / patch_size;
        if seen[cell] {
            return Err(MaskError::DuplicateTile((*oy, *ox)));
        }
        seen[cell] = true;
        if values.len() != patch_size * patch_size {
            return Err(MaskError::BadTile {
                origin: (*oy, *ox),
                got: values.len(),
                want: patch_size * patch_size,
            });
        }
        for py in 0..patch_size {
            let dst = (oy + py) * padded_w + ox;
            padded[dst..dst + patch_size]
                .copy_from_slice(&values[py * patch_size..(py + 1) * patch_size]);
        }
    }
    let missing: Vec<(usize, usize)> = (0..rows * cols)
        .filter(|&c| !seen[c])
        .map(|c| ((c / cols) * patch_size, (c % cols) * patch_size))
        .collect();
    if !missing.is_empty() {
        return Err(MaskError::MissingTiles(missing));
    }

    if padded_h == scene_h && padded_w == scene_w {
        return Ok(padded);
    }
    let mut out = Vec::with_capacity(scene_h * scene_w);
    for y in 0..scene_h {
        out.extend_from_slice(&padded[y * padded_w..y * padded_w + scene_w]);
    }
    Ok(out)
}

/// Scene-level cloud mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

pub fn stitch_masks(
    tiles: &[((usize, usize), &[u8])],
    patch_size: usize,
    scene_h: usize,
    scene_w: usize,
) -> Result<SceneMask, MaskError> {
    let values = stitch_tiles(tiles, patch_size, scene_h, scene_w)?;
    Ok(SceneMask { height: scene_h, width: scene_w, values })
}

/// Pad provenance helper for callers that want to double-check a tiling's
/// crop arithmetic.
pub fn padded_extent(scene_h: usize, scene_w: usize, patch_size: usize) -> (usize, usize, PadInfo) {
    let ph = scene_h.div_ceil(patch_size) * patch_size;
    let pw = scene_w.div_ceil(patch_size) * patch_size;
    (ph, pw, PadInfo { bottom: ph - scene_h, right: pw - scene_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainLabel, PadInfo};

    fn patch_with(data: Vec<f32>, channels: usize, size: usize, label: DomainLabel) -> Patch {
        Patch {
            scene_id: "t".into(),
            biome: None,
            origin: (0, 0),
            channels,
            size,
            data,
            image_label: label,
            pixel_mask: Some(vec![0; size * size]),
            pad: PadInfo::default(),
        }
    }

    fn identity() -> impl ClearTranslator {
        |data: &[f32], _c: usize, _s: usize| data.to_vec()
    }

    #[test]
    fn difference_map_zero_for_identity() {
        let x = vec![0.3f32; 2 * 4 * 4];
        let dm = difference_map(&x, &x, 2, 4, "p").unwrap();
        assert!(dm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn difference_map_channel_mean_arithmetic() {
        // one channel off by 0.5 at one pixel out of 10 channels -> 0.05
        let size = 2;
        let channels = 10;
        let x = vec![0.0f32; channels * size * size];
        let mut y = x.clone();
        y[0] = 0.5; // channel 0, pixel (0,0)
        let dm = difference_map(&x, &y, channels, size, "p").unwrap();
        assert!((dm.values[0] - 0.05).abs() < 1e-7);
        assert!(dm.values[1..].iter().all(|&v| v == 0.0));

        // sign symmetry: x - y = -0.2 everywhere -> 0.2 everywhere
        let x2 = vec![0.1f32; channels * size * size];
        let y2 = vec![0.3f32; channels * size * size];
        let dm2 = difference_map(&x2, &y2, channels, size, "p").unwrap();
        assert!(dm2.values.iter().all(|&v| (v - 0.2).abs() < 1e-6));
        let dm3 = difference_map(&y2, &x2, channels, size, "p").unwrap();
        assert_eq!(dm2.values, dm3.values);
    }

    #[test]
    fn difference_map_shape_mismatch() {
        assert!(difference_map(&[0.0; 4], &[0.0; 8], 1, 2, "p").is_err());
    }

    #[test]
    fn binarize_rules() {
        let dm = DifferenceMap { values: vec![0.1, 0.3, 0.05, 0.2], size: 2, source: "p".into() };
        assert_eq!(binarize(&dm, 0.15), vec![0, 1, 0, 1]);
        assert_eq!(binarize(&dm, 0.0), vec![1, 1, 1, 1]); // all strictly positive
        assert_eq!(binarize(&dm, 0.3), vec![0, 0, 0, 0]); // >= max -> all zeros
    }

    #[test]
    fn binarize_monotone_in_threshold() {
        let dm = DifferenceMap {
            values: (0..64).map(|i| (i as f32 * 0.713).sin().abs()).collect(),
            size: 8,
            source: "p".into(),
        };
        let coarse = binarize(&dm, 0.7);
        let fine = binarize(&dm, 0.2);
        for (c, f) in coarse.iter().zip(&fine) {
            assert!(c <= f, "mask(t2) must be subset of mask(t1) for t1 <= t2");
        }
    }

    #[test]
    fn select_threshold_separable_case() {
        // difference map equal to the truth mask: every threshold in (0,1)
        // attains F1 = 1; smallest grid point with F1=1 must be returned.
        let truth: Vec<u8> = (0..16).map(|i| u8::from(i % 3 == 0)).collect();
        let scores: Vec<f32> = truth.iter().map(|&t| t as f32).collect();
        let maps = [ScoredMap { scores: &scores, truth: &truth }];
        let grid = uniform_grid(1.0, 256);
        let sel = select_threshold_maps(&maps, &grid).unwrap();
        assert_eq!(sel.f1, 1.0);
        // grid[0] = 0.0 classifies all positives correctly (strict >), so the
        // smallest winning threshold is 0.
        assert_eq!(sel.threshold, 0.0);
    }

    #[test]
    fn select_threshold_single_point_grid() {
        let truth = vec![1u8, 0, 1, 0];
        let scores = vec![0.9f32, 0.1, 0.8, 0.2];
        let maps = [ScoredMap { scores: &scores, truth: &truth }];
        let sel = select_threshold_maps(&maps, &[0.5]).unwrap();
        assert_eq!(sel.threshold, 0.5);
        assert_eq!(sel.sweep.len(), 1);
        assert_eq!(sel.f1, 1.0);
    }

    #[test]
    fn select_threshold_rejects_empty() {
        assert!(matches!(
            select_threshold_maps(&[], &[0.0]),
            Err(MaskError::EmptyValidation)
        ));
        let p: Vec<&Patch> = vec![];
        assert!(select_threshold(&identity(), &p, 16).is_err());
    }

    #[test]
    fn identity_generator_gives_all_clear_masks() {
        let mut p = patch_with(vec![0.5; 3 * 4 * 4], 3, 4, DomainLabel::CLOUDY);
        p.pixel_mask = Some(vec![1; 16]);
        let mask = predict_patch_mask(&identity(), &p, 0.25, false).unwrap();
        assert!(mask.iter().all(|&v| v == 0));
        // any strictly positive threshold works
        let mask = predict_patch_mask(&identity(), &p, 1e-6, false).unwrap();
        assert!(mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn clear_labeled_patch_short_circuits() {
        let p = patch_with(vec![0.5; 4 * 4], 1, 4, DomainLabel::CLEAR);
        // translator that would claim everything changed
        let wild = |_d: &[f32], c: usize, s: usize| vec![5.0; c * s * s];
        let mask = predict_patch_mask(&wild, &p, 0.1, true).unwrap();
        assert!(mask.iter().all(|&v| v == 0));
        // with the flag off, the patch goes through the generator path
        let mask = predict_patch_mask(&wild, &p, 0.1, false).unwrap();
        assert!(mask.iter().all(|&v| v == 1));
    }

    #[test]
    fn stitch_round_trips_a_tiling() {
        // build a 5x7 "scene mask", tile it with padding, stitch it back
        let (h, w, p) = (5usize, 7usize, 4usize);
        let truth: Vec<u8> = (0..h * w).map(|i| (i % 3 == 0) as u8).collect();
        let (ph, pw, _) = padded_extent(h, w, p);
        let mut tiles: Vec<((usize, usize), Vec<u8>)> = Vec::new();
        for oy in (0..ph).step_by(p) {
            for ox in (0..pw).step_by(p) {
                let mut tile = vec![0u8; p * p];
                for ty in 0..p {
                    for tx in 0..p {
                        let sy = oy + ty;
                        let sx = ox + tx;
                        if sy < h && sx < w {
                            tile[ty * p + tx] = truth[sy * w + sx];
                        }
                    }
                }
                tiles.push(((oy, ox), tile));
            }
        }
        let refs: Vec<((usize, usize), &[u8])> =
            tiles.iter().map(|(o, t)| (*o, t.as_slice())).collect();
        let stitched = stitch_masks(&refs, p, h, w).unwrap();
        assert_eq!(stitched.values, truth);
        assert_eq!((stitched.height, stitched.width), (h, w));
    }

    #[test]
    fn stitch_places_single_block() {
        // 9-tile grid, one tile all ones -> exactly one block of ones
        let p = 128;
        let ones = vec![1u8; p * p];
        let zeros = vec![0u8; p * p];
        let mut tiles = Vec::new();
        for oy in [0usize, 128, 256] {
            for ox in [0usize, 128, 256] {
                let t: &[u8] = if (oy, ox) == (128, 128) { &ones } else { &zeros };
                tiles.push(((oy, ox), t));
            }
        }
        let m = stitch_masks(&tiles, p, 384, 384).unwrap();
        let count: usize = m.values.iter().map(|&v| v as usize).sum();
        assert_eq!(count, p * p);
        assert_eq!(m.values[129 * 384 + 129], 1);
        assert_eq!(m.values[0], 0);
    }

    #[test]
    fn stitch_rejects_missing_and_duplicate() {
        let p = 4;
        let tile = vec![0u8; p * p];
        let one: Vec<((usize, usize), &[u8])> = vec![((0, 0), tile.as_slice())];
        match stitch_masks(&one, p, 4, 8) {
            Err(MaskError::MissingTiles(m)) => assert_eq!(m, vec![(0, 4)]),
            other => panic!("expected missing tiles, got {other:?}"),
        }
        let dup: Vec<((usize, usize), &[u8])> =
            vec![((0, 0), tile.as_slice()), ((0, 0), tile.as_slice())];
        assert!(matches!(stitch_masks(&dup, p, 4, 4), Err(MaskError::DuplicateTile(_))));
        let stray: Vec<((usize, usize), &[u8])> =
            vec![((0, 0), tile.as_slice()), ((2, 0), tile.as_slice())];
        assert!(matches!(stitch_masks(&stray, p, 4, 4), Err(MaskError::UnexpectedTile(..))));
    }
}

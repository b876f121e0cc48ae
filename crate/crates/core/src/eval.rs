//! Pixel-level metrics (cloud = positive class), per-biome breakdowns, and
//! report/table/panel emission. All aggregation is micro (pixel-pooled):
//! confusions are summed first and metrics computed once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Scene;
use crate::io::{self, IoError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: pred {pred} px vs truth {truth} px")]
    ShapeMismatch { pred: usize, truth: usize },
    #[error("no pixels to evaluate")]
    Empty,
    #[error("scene {0} has no ground truth")]
    MissingTruth(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Pixel confusion counts with cloud as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Exact confusion counts; `valid` excludes nodata pixels when present.
pub fn confusion(pred: &[u8], truth: &[u8], valid: Option<&[bool]>) -> Result<Confusion, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::ShapeMismatch { pred: pred.len(), truth: truth.len() });
    }
    if let Some(v) = valid {
        if v.len() != pred.len() {
            return Err(EvalError::ShapeMismatch { pred: pred.len(), truth: v.len() });
        }
    }
    let mut c = Confusion::default();
    for i in 0..pred.len() {
        if let Some(v) = valid {
            if !v[i] {
                continue;
            }
        }
        match (pred[i] != 0, truth[i] != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// (f1, accuracy); f1 is 0 by convention when there are no positives on
/// either side.
pub fn f1_accuracy(c: &Confusion) -> Result<(f64, f64), EvalError> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * c.true_pos as f64 / denom as f64 };
    let accuracy = (c.true_pos + c.true_neg) as f64 / total as f64;
    Ok((f1, accuracy))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub clear_frac: f64,
    pub cloud_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub overall: Metrics,
    pub per_biome: BTreeMap<String, Metrics>,
    pub confusion: Confusion,
    pub class_balance: ClassBalance,
    pub seed: u64,
    pub checkpoint: String,
    pub threshold: Option<f64>,
}

/// One evaluated scene: binary prediction vs binary truth.
pub struct SceneEval<'a> {
    pub scene_id: &'a str,
    pub biome: Option<&'a str>,
    pub pred: &'a [u8],
    pub truth: &'a [u8],
    pub valid: Option<&'a [bool]>,
}

pub fn evaluate_method(
    method: &str,
    items: &[SceneEval<'_>],
    seed: u64,
    checkpoint: &str,
    threshold: Option<f64>,
) -> Result<MetricsReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut overall = Confusion::default();
    let mut per_biome: BTreeMap<String, Confusion> = BTreeMap::new();
    for item in items {
        let c = confusion(item.pred, item.truth, item.valid)?;
        overall.merge(&c);
        per_biome
            .entry(item.biome.unwrap_or("unknown").to_string())
            .or_default()
            .merge(&c);
    }
    let (f1, accuracy) = f1_accuracy(&overall)?;
    let mut biome_metrics = BTreeMap::new();
    for (biome, c) in per_biome {
        let (bf1, bacc) = f1_accuracy(&c)?;
        biome_metrics.insert(biome, Metrics { f1: bf1, accuracy: bacc });
    }
    let positives = (overall.true_pos + overall.false_neg) as f64;
    let total = overall.total() as f64;
    Ok(MetricsReport {
        method: method.to_string(),
        overall: Metrics { f1, accuracy },
        per_biome: biome_metrics,
        confusion: overall,
        class_balance: ClassBalance {
            clear_frac: 1.0 - positives / total,
            cloud_frac: positives / total,
        },
        seed,
        checkpoint: checkpoint.to_string(),
        threshold,
    })
}

// ---- artifact emission ----

/// Inputs for one five-tile comparison panel.
pub struct PanelSource<'a> {
    pub scene: &'a Scene,
    pub diff_map: Option<&'a [f32]>,
    pub fcd_mask: Option<&'a [u8]>,
    pub refined_mask: Option<&'a [u8]>,
}

pub const PANEL_TILE_WIDTH: usize = 128;

/// Write table.csv: one row per method.
pub fn write_table_csv(reports: &[MetricsReport], path: &Path) -> Result<(), EvalError> {
    let mut csv = String::from("method,f1,accuracy,threshold,checkpoint\n");
    for r in reports {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            r.method,
            r.overall.f1,
            r.overall.accuracy,
            r.threshold.map(|t| format!("{t:.6}")).unwrap_or_default(),
            r.checkpoint
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Fs { path: parent.into(), source })?;
    }
    std::fs::write(path, csv).map_err(|source| IoError::Fs { path: path.into(), source })?;
    Ok(())
}

/// Render one five-tile panel per scene under `dir`.
pub fn write_panels(panels: &[PanelSource<'_>], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut written = Vec::new();
    for p in panels {
        let path = dir.join(format!("{}.png", p.scene.id));
        render_panel(p, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Write report.json, table.csv (one row per method), and per-scene panels
/// (input composite | difference map | mask | refined mask | ground truth).
pub fn emit_artifacts(
    reports: &[MetricsReport],
    panels: &[PanelSource<'_>],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let mut written = Vec::new();

    let report_path = out_dir.join("report.json");
    io::write_json(&report_path, &reports.to_vec())?;
    written.push(report_path);

    let table_path = out_dir.join("table.csv");
    write_table_csv(reports, &table_path)?;
    written.push(table_path);

    written.extend(write_panels(panels, &out_dir.join("panels"))?);
    Ok(written)
}

fn render_panel(src: &PanelSource<'_>, path: &Path) -> Result<(), EvalError> {
    let scene = src.scene;
    let tile_w = PANEL_TILE_WIDTH;
    let tile_h = (scene.height * tile_w).div_ceil(scene.width).max(1);
    let width = tile_w * 5;
    let mut rgb = vec![0u8; width * tile_h * 3];

    let sample = |frac_y: f64, frac_x: f64| -> (usize, usize) {
        let sy = ((frac_y * scene.height as f64) as usize).min(scene.height - 1);
        let sx = ((frac_x * scene.width as f64) as usize).min(scene.width - 1);
        (sy, sx)
    };

    // Per-band min/max for the composite tile.
    let nb = scene.channels.min(3);
    let mut ranges = Vec::with_capacity(nb);
    for c in 0..nb {
        let band = scene.band(c);
        let lo = band.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = band.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        ranges.push((lo, (hi - lo).max(1e-6)));
    }
    let dm_max = src
        .diff_map
        .map(|d| d.iter().cloned().fold(0.0f32, f32::max).max(1e-6))
        .unwrap_or(1.0);

    for ty in 0..tile_h {
        let fy = (ty as f64 + 0.5) / tile_h as f64;
        for tx in 0..tile_w {
            let fx = (tx as f64 + 0.5) / tile_w as f64;
            let (sy, sx) = sample(fy, fx);
            let idx = sy * scene.width + sx;

            // tile 0: band composite
            let mut px = [0u8; 3];
            for (c, &(lo, span)) in ranges.iter().enumerate() {
                let v = ((scene.band(c)[idx] - lo) / span).clamp(0.0, 1.0);
                px[c] = (v * 255.0) as u8;
            }
            if nb == 1 {
                px = [px[0]; 3];
            }
            put(&mut rgb, width, ty, tx, px);

            // tile 1: difference map
            let dm_px = src
                .diff_map
                .map(|d| ((d[idx] / dm_max).clamp(0.0, 1.0) * 255.0) as u8)
                .unwrap_or(0);
            put(&mut rgb, width, ty, tile_w + tx, [dm_px; 3]);

            // tiles 2/3: masks
            let m1 = src.fcd_mask.map(|m| if m[idx] != 0 { 255 } else { 0 }).unwrap_or(0);
            put(&mut rgb, width, ty, 2 * tile_w + tx, [m1; 3]);
            let m2 = src.refined_mask.map(|m| if m[idx] != 0 { 255 } else { 0 }).unwrap_or(0);
            put(&mut rgb, width, ty, 3 * tile_w + tx, [m2; 3]);

            // tile 4: ground truth
            let gt = scene
                .pixel_labels
                .as_ref()
                .map(|l| if l[idx] != 0 { 255 } else { 0 })
                .unwrap_or(0);
            put(&mut rgb, width, ty, 4 * tile_w + tx, [gt; 3]);
        }
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Fs { path: parent.into(), source })?;
    }
    let file = std::fs::File::create(path).map_err(|source| IoError::Fs { path: path.into(), source })?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), width as u32, tile_h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| IoError::Format { path: path.into(), message: e.to_string() })?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| IoError::Format { path: path.into(), message: e.to_string() })?;
    Ok(())
}

fn put(rgb: &mut [u8], width: usize, y: usize, x: usize, px: [u8; 3]) {
    let base = (y * width + x) * 3;
    rgb[base..base + 3].copy_from_slice(&px);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_trivial_cases() {
        let ones = vec![1u8; 8];
        let zeros = vec![0u8; 8];
        let c = confusion(&ones, &ones, None).unwrap();
        assert_eq!(c, Confusion { true_pos: 8, false_pos: 0, false_neg: 0, true_neg: 0 });
        let c = confusion(&ones, &zeros, None).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
        assert_eq!(c.false_pos, 8);
    }

    #[test]
    fn confusion_enumerated_fixture() {
        let pred = [1u8, 1, 0, 0];
        let truth = [1u8, 0, 1, 0];
        let c = confusion(&pred, &truth, None).unwrap();
        assert_eq!(c, Confusion { true_pos: 1, false_pos: 1, false_neg: 1, true_neg: 1 });
    }

    #[test]
    fn confusion_respects_valid_mask() {
        let pred = [1u8, 1, 0, 0];
        let truth = [1u8, 0, 1, 0];
        let valid = [true, false, true, false];
        let c = confusion(&pred, &truth, Some(&valid)).unwrap();
        assert_eq!(c, Confusion { true_pos: 1, false_pos: 0, false_neg: 1, true_neg: 0 });
    }

    #[test]
    fn confusion_shape_mismatch() {
        assert!(confusion(&[1], &[1, 0], None).is_err());
    }

    #[test]
    fn f1_accuracy_closed_forms() {
        let c = Confusion { true_pos: 2, false_pos: 1, false_neg: 1, true_neg: 0 };
        let (f1, acc) = f1_accuracy(&c).unwrap();
        assert!((f1 - 4.0 / 6.0).abs() < 1e-12);
        assert!((acc - 0.5).abs() < 1e-12);

        let perfect = Confusion { true_pos: 5, false_pos: 0, false_neg: 0, true_neg: 5 };
        assert_eq!(f1_accuracy(&perfect).unwrap(), (1.0, 1.0));

        // all-negative pred on all-negative truth: f1 = 0 by convention
        let degenerate = Confusion { true_pos: 0, false_pos: 0, false_neg: 0, true_neg: 9 };
        assert_eq!(f1_accuracy(&degenerate).unwrap(), (0.0, 1.0));

        assert!(f1_accuracy(&Confusion::default()).is_err());
    }

    #[test]
    fn pooling_is_confusion_sum_not_metric_mean() {
        // two scenes with very different sizes; micro pooling must weight by
        // pixels, not average the per-scene F1s.
        let pred_a = vec![1u8; 10];
        let truth_a = vec![1u8; 10];
        let pred_b = vec![0u8; 990];
        let mut truth_b = vec![0u8; 990];
        truth_b[0] = 1;
        let items = [
            SceneEval { scene_id: "a", biome: Some("x"), pred: &pred_a, truth: &truth_a, valid: None },
            SceneEval { scene_id: "b", biome: Some("y"), pred: &pred_b, truth: &truth_b, valid: None },
        ];
        let report = evaluate_method("m", &items, 0, "ckpt", None).unwrap();
        let mut pooled = confusion(&pred_a, &truth_a, None).unwrap();
        pooled.merge(&confusion(&pred_b, &truth_b, None).unwrap());
        let (expect_f1, expect_acc) = f1_accuracy(&pooled).unwrap();
        assert_eq!(report.overall.f1, expect_f1);
        assert_eq!(report.overall.accuracy, expect_acc);
        assert_eq!(report.per_biome.len(), 2);
        // single scene in a biome: biome metrics equal that scene's metrics
        let (fa, _) = f1_accuracy(&confusion(&pred_a, &truth_a, None).unwrap()).unwrap();
        assert_eq!(report.per_biome["x"].f1, fa);
    }

    #[test]
    fn report_class_balance() {
        let pred = vec![1u8, 0, 1, 0];
        let truth = vec![1u8, 1, 0, 0];
        let items =
            [SceneEval { scene_id: "s", biome: None, pred: &pred, truth: &truth, valid: None }];
        let r = evaluate_method("m", &items, 3, "c", Some(0.5)).unwrap();
        assert_eq!(r.class_balance.cloud_frac, 0.5);
        assert_eq!(r.class_balance.clear_frac, 0.5);
        assert_eq!(r.threshold, Some(0.5));
        assert_eq!(r.checkpoint, "c");
    }
}

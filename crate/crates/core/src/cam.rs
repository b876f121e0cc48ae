//! Weakly-supervised baselines: a binary cloud/clear patch classifier and
//! the CAM / GradCAM / GradCAM++ localization maps, binarized through the
//! same threshold sweep as the difference maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fcd_tensor::graph::{Graph, NodeId};
use fcd_tensor::nn::{Conv2d, Linear};
use fcd_tensor::optim::Adam;
use fcd_tensor::params::{Bound, ParamSet};
use fcd_tensor::rng::Rng;

use crate::data::Patch;
use crate::mask::{self, MaskError, ScoredMap, ThresholdSelection};

#[derive(Debug, Error)]
pub enum CamError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("training set contains a single class only")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamMethod {
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcampp")]
    GradCamPP,
}

impl CamMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CamMethod::Cam => "cam",
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPP => "gradcampp",
        }
    }

    pub const ALL: [CamMethod; 3] = [CamMethod::Cam, CamMethod::GradCam, CamMethod::GradCamPP];
}

/// Localization heat map over one patch, min-max normalized into [0, 1].
#[derive(Clone, Debug)]
pub struct ActivationMap {
    pub values: Vec<f32>,
    pub size: usize,
    pub method: CamMethod,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierCfg {
    pub channels: usize,
    pub base_width: usize,
}

/// Small convolutional classifier with a global-average-pooled linear head.
/// The final feature maps sit at P/8 x P/8 (four map cells per side on a
/// 32-pixel patch, matching the relative coarseness of GAP-backbone
/// localization maps), and their extent divides the patch size.
pub struct PatchClassifier {
    pub cfg: ClassifierCfg,
    params: ParamSet,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    conv4: Conv2d,
    head: Linear,
}

impl PatchClassifier {
    pub fn new(cfg: ClassifierCfg, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let mut rng = Rng::seed_stream(seed, 0x434c53);
        let w = cfg.base_width;
        let conv1 = Conv2d::new(&mut ps, &mut rng, "c.conv1", cfg.channels, w, 3, 1, 1, true);
        let conv2 = Conv2d::new(&mut ps, &mut rng, "c.conv2", w, 2 * w, 4, 2, 1, true);
        let conv3 = Conv2d::new(&mut ps, &mut rng, "c.conv3", 2 * w, 4 * w, 4, 2, 1, true);
        let conv4 = Conv2d::new(&mut ps, &mut rng, "c.conv4", 4 * w, 4 * w, 4, 2, 1, true);
        let head = Linear::new(&mut ps, &mut rng, "c.head", 4 * w, 1, true);
        PatchClassifier { cfg, params: ps, conv1, conv2, conv3, conv4, head }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_channels(&self) -> usize {
        4 * self.cfg.base_width
    }

    pub fn load_params(&mut self, loaded: ParamSet) -> Result<(), CamError> {
        if loaded.len() != self.params.len() {
            return Err(CamError::BadConfig(format!(
                "checkpoint has {} params, classifier has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.entries().iter().zip(loaded.entries()) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(CamError::BadConfig(format!(
                    "parameter mismatch: {}{:?} vs {}{:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Forward pass exposing the last conv features and the cloudy logit.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> (NodeId, NodeId) {
        let h = self.conv1.forward(g, bound, x);
        let h = g.leaky_relu(h, 0.01);
        let h = self.conv2.forward(g, bound, h);
        let h = g.leaky_relu(h, 0.01);
        let h = self.conv3.forward(g, bound, h);
        let h = g.leaky_relu(h, 0.01);
        let h = self.conv4.forward(g, bound, h);
        let features = g.leaky_relu(h, 0.01);
        let pooled = g.mean_spatial(features);
        let logit2d = self.head.forward(g, bound, pooled);
        let logit = g.mean_per_sample(logit2d);
        (features, logit)
    }

    /// Cloudy probability for a batch laid out [B, C, P, P].
    pub fn predict_proba(&self, data: &[f32], batch: usize, size: usize) -> Vec<f32> {
        let mut g = Graph::new();
        let x = g.constant(data.to_vec(), &[batch, self.cfg.channels, size, size]);
        let bound = self.params.bind(&mut g, false);
        let (_, logit) = self.forward(&mut g, &bound, x);
        let p = g.sigmoid(logit);
        g.data(p).to_vec()
    }

    /// Head weights over feature channels for the cloudy class.
    pub fn head_weights(&self) -> Vec<f32> {
        self.params.entry(self.head.w).data.clone()
    }

    /// Features and input-gradient of the cloudy logit for one patch.
    fn features_and_grad(&self, patch: &Patch) -> (Vec<f32>, Vec<f32>, usize) {
        let mut g = Graph::new();
        let x = g.leaf(patch.data.clone(), &[1, patch.channels, patch.size, patch.size]);
        let bound = self.params.bind(&mut g, false);
        let (features, logit) = self.forward(&mut g, &bound, x);
        let scalar = g.mean_all(logit);
        let grads = g.backward(scalar);
        let fdata = g.data(features).to_vec();
        let fh = g.shape(features)[2];
        let gdata = match grads.get(features) {
            Some(gid) => g.data(gid).to_vec(),
            None => vec![0.0; fdata.len()],
        };
        (fdata, gdata, fh)
    }

    fn features_of(&self, patch: &Patch) -> (Vec<f32>, usize) {
        let mut g = Graph::new();
        let x = g.constant(patch.data.clone(), &[1, patch.channels, patch.size, patch.size]);
        let bound = self.params.bind(&mut g, false);
        let (features, _) = self.forward(&mut g, &bound, x);
        let fh = g.shape(features)[2];
        (g.data(features).to_vec(), fh)
    }
}

// ---- map arithmetic (pure, shared by all three methods) ----

/// Channel-weighted sum of feature maps, optionally rectified.
pub fn weighted_feature_sum(
    features: &[f32],
    channels: usize,
    plane: usize,
    weights: &[f32],
    rectify: bool,
) -> Vec<f32> {
    assert_eq!(features.len(), channels * plane);
    assert_eq!(weights.len(), channels);
    let mut out = vec![0.0f32; plane];
    for c in 0..channels {
        let w = weights[c];
        if w == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(&features[c * plane..(c + 1) * plane]) {
            *o += w * f;
        }
    }
    if rectify {
        out.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// Bilinear resize (align-corners) of a single-channel map.
pub fn bilinear_upsample(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw);
    let mut out = vec![0.0f32; dh * dw];
    let fy = if dh > 1 { (sh - 1) as f32 / (dh - 1) as f32 } else { 0.0 };
    let fx = if dw > 1 { (sw - 1) as f32 / (dw - 1) as f32 } else { 0.0 };
    for y in 0..dh {
        let sy = y as f32 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f32;
        for x in 0..dw {
            let sx = x as f32 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Min-max normalization into [0, 1]; constant maps collapse to zeros.
pub fn minmax_normalize(values: &mut [f32]) {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo || !hi.is_finite() || !lo.is_finite() {
        values.fill(0.0);
        return;
    }
    let inv = 1.0 / (hi - lo);
    values.iter_mut().for_each(|v| *v = (*v - lo) * inv);
}

fn finish_map(raw: Vec<f32>, fh: usize, size: usize, method: CamMethod) -> ActivationMap {
    let mut up = bilinear_upsample(&raw, fh, fh, size, size);
    minmax_normalize(&mut up);
    ActivationMap { values: up, size, method }
}

/// Class activation map: head weights over GAP features.
pub fn cam_map(clf: &PatchClassifier, patch: &Patch) -> ActivationMap {
    let (features, fh) = clf.features_of(patch);
    let raw = weighted_feature_sum(
        &features,
        clf.feature_channels(),
        fh * fh,
        &clf.head_weights(),
        false,
    );
    finish_map(raw, fh, patch.size, CamMethod::Cam)
}

/// GradCAM: channel weights are the spatial means of the cloudy-logit
/// gradients; the weighted sum is rectified.
pub fn gradcam_map(clf: &PatchClassifier, patch: &Patch) -> ActivationMap {
    let (features, grads, fh) = clf.features_and_grad(patch);
    let plane = fh * fh;
    let channels = clf.feature_channels();
    let weights: Vec<f32> = (0..channels)
        .map(|c| {
            let sum: f64 = grads[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum();
            (sum / plane as f64) as f32
        })
        .collect();
    let raw = weighted_feature_sum(&features, channels, plane, &weights, true);
    finish_map(raw, fh, patch.size, CamMethod::GradCam)
}

/// GradCAM++: per-pixel alpha weights from the second/third-power gradient
/// form, multiplied by rectified gradients and summed per channel.
pub fn gradcampp_map(clf: &PatchClassifier, patch: &Patch) -> ActivationMap {
    let (features, grads, fh) = clf.features_and_grad(patch);
    let plane = fh * fh;
    let channels = clf.feature_channels();
    let mut weights = vec![0.0f32; channels];
    for c in 0..channels {
        let f = &features[c * plane..(c + 1) * plane];
        let g = &grads[c * plane..(c + 1) * plane];
        let sum_fg3: f64 = f.iter().zip(g).map(|(&fv, &gv)| fv as f64 * (gv as f64).powi(3)).sum();
        let mut w = 0.0f64;
        for &gv in g {
            let g2 = (gv as f64) * (gv as f64);
            let denom = 2.0 * g2 + sum_fg3;
            if denom.abs() > 1e-12 && gv > 0.0 {
                w += (g2 / denom) * gv as f64;
            }
        }
        weights[c] = w as f32;
    }
    let raw = weighted_feature_sum(&features, channels, plane, &weights, true);
    finish_map(raw, fh, patch.size, CamMethod::GradCamPP)
}

pub fn activation_map(clf: &PatchClassifier, patch: &Patch, method: CamMethod) -> ActivationMap {
    match method {
        CamMethod::Cam => cam_map(clf, patch),
        CamMethod::GradCam => gradcam_map(clf, patch),
        CamMethod::GradCamPP => gradcampp_map(clf, patch),
    }
}

// ---- training ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for CamTrainConfig {
    fn default() -> Self {
        CamTrainConfig { epochs: 10, batch_size: 32, lr: 1e-3, base_width: 8, seed: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainedClassifier {
    pub classifier: PatchClassifier,
    pub trace: Vec<ClsEpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn batch_arrays(patches: &[&Patch]) -> (Vec<f32>, Vec<f32>) {
    let mut x = Vec::with_capacity(patches.len() * patches[0].data.len());
    let mut labels = Vec::with_capacity(patches.len());
    for p in patches {
        x.extend_from_slice(&p.data);
        labels.push(p.image_label.value() as f32);
    }
    (x, labels)
}

fn val_accuracy(clf: &PatchClassifier, val: &[Patch]) -> f64 {
    if val.is_empty() {
        return f64::NAN;
    }
    let mut correct = 0usize;
    for p in val {
        let prob = clf.predict_proba(&p.data, 1, p.size)[0];
        let pred = prob > 0.5;
        if pred == p.image_label.is_cloudy() {
            correct += 1;
        }
    }
    correct as f64 / val.len() as f64
}

/// Binary cross-entropy training on image-level labels; keeps the
/// best-validation-accuracy parameters.
pub fn train_classifier(
    train: &[Patch],
    val: &[Patch],
    cfg: &CamTrainConfig,
) -> Result<TrainedClassifier, CamError> {
    if train.is_empty() {
        return Err(CamError::Empty);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.base_width == 0 {
        return Err(CamError::BadConfig("epochs/batch_size/base_width must be positive".into()));
    }
    let n_cloudy = train.iter().filter(|p| p.image_label.is_cloudy()).count();
    if n_cloudy == 0 || n_cloudy == train.len() {
        return Err(CamError::SingleClass);
    }

    let mut clf = PatchClassifier::new(
        ClassifierCfg { channels: train[0].channels, base_width: cfg.base_width },
        cfg.seed,
    );
    let mut opt = Adam::new(clf.params(), 0.9, 0.999);
    let mut rng = Rng::seed_stream(cfg.seed, 0x434c54);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut trace = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = clf.params().clone();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Patch> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, labels) = batch_arrays(&batch);
            let size = batch[0].size;
            let mut g = Graph::new();
            let xn = g.constant(x, &[batch.len(), clf.cfg.channels, size, size]);
            let bound = clf.params.bind(&mut g, true);
            let (_, logit) = clf.forward(&mut g, &bound, xn);
            let p_true = crate::gan::graph_losses::prob_of_label(&mut g, logit, &labels);
            let loss = crate::gan::graph_losses::nll_term(&mut g, p_true);
            let value = g.scalar_value(loss) as f64;
            if !value.is_finite() {
                return Err(CamError::NonFinite(epoch));
            }
            loss_sum += value;
            batches += 1;
            let grads = g.backward(loss);
            let gvecs: Vec<Option<Vec<f32>>> = bound
                .ids
                .iter()
                .map(|&id| grads.get(id).map(|gid| g.data(gid).to_vec()))
                .collect();
            opt.step(clf.params_mut(), &gvecs, cfg.lr as f32);
        }
        let acc = val_accuracy(&clf, val);
        trace.push(ClsEpochRecord { epoch, train_loss: loss_sum / batches.max(1) as f64, val_accuracy: acc });
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch;
            best_params = clf.params().clone();
        }
    }
    if best_acc.is_finite() {
        clf.params = best_params;
    }
    Ok(TrainedClassifier { classifier: clf, trace, best_epoch, best_val_accuracy: best_acc })
}

/// Per-patch pseudo masks from activation maps, with the threshold chosen on
/// cloudy validation patches through the shared sweep.
pub fn cam_pseudo_masks(
    clf: &PatchClassifier,
    patches: &[Patch],
    val_cloudy: &[&Patch],
    method: CamMethod,
    grid_points: usize,
) -> Result<(Vec<Vec<u8>>, ThresholdSelection), CamError> {
    if val_cloudy.is_empty() {
        return Err(CamError::Empty);
    }
    let val_maps: Vec<ActivationMap> =
        val_cloudy.iter().map(|p| activation_map(clf, p, method)).collect();
    let scored: Vec<ScoredMap<'_>> = val_maps
        .iter()
        .zip(val_cloudy)
        .map(|(m, p)| ScoredMap {
            scores: &m.values,
            truth: p.pixel_mask.as_deref().expect("validation patches carry ground truth"),
        })
        .collect();
    let grid = mask::uniform_grid(1.0, grid_points);
    let selection = mask::select_threshold_maps(&scored, &grid)?;

    let masks = patches
        .iter()
        .map(|p| {
            if !p.image_label.is_cloudy() {
                vec![0u8; p.size * p.size]
            } else {
                let m = activation_map(clf, p, method);
                m.values.iter().map(|&v| u8::from(v > selection.threshold)).collect()
            }
        })
        .collect();
    Ok((masks, selection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainLabel, PadInfo};

    fn patch(data: Vec<f32>, channels: usize, size: usize, cloudy: bool) -> Patch {
        let mask = if cloudy {
            (0..size * size).map(|i| u8::from(i < size * size / 2)).collect()
        } else {
            vec![0u8; size * size]
        };
        Patch {
            scene_id: "p".into(),
            biome: None,
            origin: (0, 0),
            channels,
            size,
            data,
            image_label: if cloudy { DomainLabel::CLOUDY } else { DomainLabel::CLEAR },
            pixel_mask: Some(mask),
            pad: PadInfo::default(),
        }
    }

    #[test]
    fn weighted_sum_hand_fixture() {
        // two 2x2 feature maps, weights (2, -1):
        // F0 = [1,2,3,4], F1 = [0,1,0,1] -> 2*F0 - F1 = [2,3,6,7]
        let features = vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 1.0];
        let out = weighted_feature_sum(&features, 2, 4, &[2.0, -1.0], false);
        assert_eq!(out, vec![2.0, 3.0, 6.0, 7.0]);
        // rectification clips negatives
        let out = weighted_feature_sum(&features, 2, 4, &[-1.0, 0.0], true);
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn single_feature_map_cam_is_normalized_upsample() {
        // one channel, weight 1: the map is the (normalized, upsampled) copy
        let src = vec![0.0, 1.0, 2.0, 3.0];
        let up = bilinear_upsample(&src, 2, 2, 4, 4);
        // corners preserved by align-corners resize
        assert_eq!(up[0], 0.0);
        assert_eq!(up[3], 1.0);
        assert_eq!(up[12], 2.0);
        assert_eq!(up[15], 3.0);
        let mut normed = up.clone();
        minmax_normalize(&mut normed);
        assert_eq!(normed[0], 0.0);
        assert_eq!(normed[15], 1.0);
    }

    #[test]
    fn constant_map_normalizes_to_zeros() {
        let mut v = vec![0.7f32; 9];
        minmax_normalize(&mut v);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn maps_have_unit_range_and_patch_shape() {
        let clf = PatchClassifier::new(ClassifierCfg { channels: 2, base_width: 4 }, 9);
        let data: Vec<f32> = (0..2 * 16 * 16).map(|i| ((i * 7) % 13) as f32 / 13.0 - 0.5).collect();
        let p = patch(data, 2, 16, true);
        for method in CamMethod::ALL {
            let m = activation_map(&clf, &p, method);
            assert_eq!(m.values.len(), 16 * 16);
            assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)), "{method:?}");
        }
    }

    #[test]
    fn gradcam_is_rectified_and_zero_grads_give_zero_map() {
        // head weights zero -> logit constant -> zero gradients -> zero map
        let mut clf = PatchClassifier::new(ClassifierCfg { channels: 1, base_width: 2 }, 1);
        let head_w = clf.head.w;
        clf.params_mut().entry_mut(head_w).data.fill(0.0);
        let p = patch(vec![0.3; 16 * 16], 1, 16, true);
        let m = gradcam_map(&clf, &p);
        assert!(m.values.iter().all(|&v| v == 0.0));
        let mpp = gradcampp_map(&clf, &p);
        assert!(mpp.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcampp_equals_gradcam_on_constant_gradient_fixture() {
        // With spatially constant positive gradients and zero-sum feature
        // maps, alpha is uniformly 1/2, so both weightings are proportional
        // and the normalized maps coincide.
        let plane = 4;
        let channels = 2;
        let features = vec![
            0.5, -0.5, 0.25, -0.25, // zero-sum channel 0
            1.0, -1.0, 0.5, -0.5, // zero-sum channel 1
        ];
        let grads = vec![0.3f32; channels * plane];

        // gradcam weights: mean grad per channel = 0.3
        let w_gc = vec![0.3f32, 0.3];
        let mut gc = weighted_feature_sum(&features, channels, plane, &w_gc, true);
        minmax_normalize(&mut gc);

        // gradcam++ weights via the production formula
        let mut w_pp = vec![0.0f32; channels];
        for c in 0..channels {
            let f = &features[c * plane..(c + 1) * plane];
            let gch = &grads[c * plane..(c + 1) * plane];
            let sum_fg3: f64 = f.iter().zip(gch).map(|(&fv, &gv)| fv as f64 * (gv as f64).powi(3)).sum();
            let mut w = 0.0f64;
            for &gv in gch {
                let g2 = (gv as f64) * (gv as f64);
                let denom = 2.0 * g2 + sum_fg3;
                if denom.abs() > 1e-12 && gv > 0.0 {
                    w += (g2 / denom) * gv as f64;
                }
            }
            w_pp[c] = w as f32;
        }
        // alpha = g^2 / (2 g^2) = 1/2 exactly since sum(F g^3) = 0
        for &w in &w_pp {
            assert!((w - 4.0 * 0.5 * 0.3).abs() < 1e-6, "w = {w}");
        }
        let mut pp = weighted_feature_sum(&features, channels, plane, &w_pp, true);
        minmax_normalize(&mut pp);
        for (a, b) in gc.iter().zip(&pp) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn classifier_rejects_single_class() {
        let train: Vec<Patch> = (0..4).map(|_| patch(vec![0.1; 8 * 8], 1, 8, false)).collect();
        match train_classifier(&train, &[], &CamTrainConfig::default()) {
            Err(CamError::SingleClass) => {}
            Err(other) => panic!("wrong error: {other}"),
            Ok(_) => panic!("single-class training set must be rejected"),
        }
    }

    #[test]
    fn classifier_zero_lr_keeps_params() {
        let train: Vec<Patch> = (0..6)
            .map(|i| patch(vec![if i % 2 == 0 { 0.8 } else { -0.6 }; 8 * 8], 1, 8, i % 2 == 0))
            .collect();
        let cfg = CamTrainConfig { epochs: 1, batch_size: 3, lr: 0.0, base_width: 2, seed: 7 };
        let before = PatchClassifier::new(ClassifierCfg { channels: 1, base_width: 2 }, 7)
            .params()
            .checksum();
        let out = train_classifier(&train, &[], &cfg).unwrap();
        assert_eq!(out.classifier.params().checksum(), before);
    }

    #[test]
    fn classifier_training_deterministic() {
        let mut rng = Rng::seed_from(3);
        let train: Vec<Patch> = (0..8)
            .map(|i| {
                let cloudy = i % 2 == 0;
                let data: Vec<f32> = (0..8 * 8)
                    .map(|_| if cloudy { 0.5 + 0.3 * rng.uniform_f32() } else { -0.5 - 0.3 * rng.uniform_f32() })
                    .collect();
                patch(data, 1, 8, cloudy)
            })
            .collect();
        let val = train.clone();
        let cfg = CamTrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, base_width: 2, seed: 5 };
        let a = train_classifier(&train, &val, &cfg).unwrap();
        let b = train_classifier(&train, &val, &cfg).unwrap();
        assert_eq!(a.classifier.params().checksum(), b.classifier.params().checksum());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn pseudo_masks_clear_patches_are_zero_and_sweep_matches_separable_case() {
        let clf = PatchClassifier::new(ClassifierCfg { channels: 1, base_width: 2 }, 11);
        let cloudy = patch(vec![0.9; 16 * 16], 1, 16, true);
        let clear = patch(vec![-0.9; 16 * 16], 1, 16, false);
        let patches = vec![cloudy.clone(), clear];
        let val: Vec<&Patch> = vec![&cloudy];
        let (masks, sel) =
            cam_pseudo_masks(&clf, &patches, &val, CamMethod::Cam, 64).unwrap();
        assert_eq!(masks.len(), 2);
        assert!(masks[1].iter().all(|&v| v == 0), "clear patch must be all zeros");
        assert!(sel.sweep.len() == 64);
        assert!((0.0..=1.0).contains(&sel.threshold));
    }
}

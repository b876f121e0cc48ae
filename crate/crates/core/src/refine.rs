//! Refinement stage: an encoder-decoder segmentation network trained on
//! frozen pseudo masks with an auxiliary image-level head, plus optional
//! fine-tuning on a small stratified fraction of real pixel labels with the
//! encoder frozen.
//!
//! Training consumes [`PseudoLabeledPatch`], a type that simply has no real
//! pixel mask field: redaction is structural, not a runtime check.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fcd_tensor::graph::{Graph, NodeId};
use fcd_tensor::nn::{Conv2d, Linear};
use fcd_tensor::optim::Adam;
use fcd_tensor::params::{Bound, ParamSet};
use fcd_tensor::rng::Rng;

use crate::data::{DomainLabel, Patch, Scene, TileOptions};
use crate::eval::{confusion, f1_accuracy, Confusion};
use crate::gan::graph_losses as gl;
use crate::io::IoError;
use crate::mask::{self, MaskError, SceneMask};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("missing pseudo masks for patches: {}", .0.join(", "))]
    MissingPseudoMasks(Vec<String>),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("patch {0} has no real pixel mask")]
    MissingRealMask(String),
    #[error("non-finite loss in epoch {0}")]
    NonFinite(usize),
    #[error("label fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

// ---- network ----

#[derive(Clone, Copy, Debug)]
pub struct SegNetCfg {
    pub channels: usize,
    pub base_width: usize,
    /// Number of encoder stages; stage 0 keeps resolution, each later stage
    /// halves it.
    pub depth: usize,
}

struct Stage {
    conv: Conv2d,
}

pub struct SegNet {
    pub cfg: SegNetCfg,
    params: ParamSet,
    enc: Vec<Stage>,
    dec: Vec<Stage>,
    pix: Conv2d,
    aux: Linear,
}

/// Encoder parameters are the ones whose names start with this prefix;
/// fine-tuning freezes exactly these.
pub const ENCODER_PREFIX: &str = "enc.";

impl SegNet {
    pub fn new(cfg: SegNetCfg, seed: u64) -> Self {
        assert!(cfg.depth >= 2, "segnet needs at least two encoder stages");
        let mut ps = ParamSet::new();
        let mut rng = Rng::seed_stream(seed, 0x554e4554);
        let w = cfg.base_width;
        let mut enc = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let in_ch = if i == 0 { cfg.channels } else { w << (i - 1) };
            let out_ch = w << i;
            let stride = if i == 0 { 1 } else { 2 };
            enc.push(Stage {
                conv: Conv2d::new(&mut ps, &mut rng, &format!("enc.{i}.conv"), in_ch, out_ch, 3, stride, 1, true),
            });
        }
        let mut dec = Vec::with_capacity(cfg.depth - 1);
        for i in (0..cfg.depth - 1).rev() {
            let in_ch = (w << (i + 1)) + (w << i);
            let out_ch = w << i;
            dec.push(Stage {
                conv: Conv2d::new(&mut ps, &mut rng, &format!("dec.{i}.conv"), in_ch, out_ch, 3, 1, 1, true),
            });
        }
        let pix = Conv2d::new(&mut ps, &mut rng, "pix.conv", w, 1, 3, 1, 1, true);
        let aux = Linear::new(&mut ps, &mut rng, "aux.head", w << (cfg.depth - 1), 1, true);
        SegNet { cfg, params: ps, enc, dec, pix, aux }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.params.checksum_where(|n| n.starts_with(ENCODER_PREFIX))
    }

    pub fn load_params(&mut self, loaded: ParamSet) -> Result<(), RefineError> {
        if loaded.len() != self.params.len() {
            return Err(RefineError::BadConfig(format!(
                "checkpoint has {} params, net has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.entries().iter().zip(loaded.entries()) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(RefineError::BadConfig(format!(
                    "parameter mismatch: {}{:?} vs {}{:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Returns (pixel logits [B,1,P,P], aux cloudy logit [B]).
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> (NodeId, NodeId) {
        let shape = g.shape(x).to_vec();
        let p = shape[2];
        let factor = 1usize << (self.cfg.depth - 1);
        assert!(p.is_multiple_of(factor), "patch size {p} must be divisible by {factor}");

        // No per-sample normalization here: it would subtract exactly the
        // absolute-brightness signal pixel classification relies on.
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for stage in &self.enc {
            let c = stage.conv.forward(g, bound, h);
            h = g.relu(c);
            skips.push(h);
        }
        let bottleneck = h;

        for (j, stage) in self.dec.iter().enumerate() {
            let skip = skips[self.cfg.depth - 2 - j];
            let up = g.upsample_nearest2x(h);
            let cat = g.concat_c(up, skip);
            let c = stage.conv.forward(g, bound, cat);
            h = g.relu(c);
        }
        let pix_logits = self.pix.forward(g, bound, h);

        let pooled = g.mean_spatial(bottleneck);
        let aux2d = self.aux.forward(g, bound, pooled);
        let aux_logit = g.mean_per_sample(aux2d);
        (pix_logits, aux_logit)
    }

    /// Per-pixel cloud probabilities for a batch laid out [B, C, P, P].
    pub fn predict_probs(&self, data: &[f32], batch: usize, size: usize) -> Vec<f32> {
        let mut g = Graph::new();
        let x = g.constant(data.to_vec(), &[batch, self.cfg.channels, size, size]);
        let bound = self.params.bind(&mut g, false);
        let (pix_logits, _) = self.forward(&mut g, &bound, x);
        let p = g.sigmoid(pix_logits);
        g.data(p).to_vec()
    }
}

// ---- training data ----

/// A patch whose only pixel-level signal is the frozen pseudo mask.
#[derive(Clone, Debug)]
pub struct PseudoLabeledPatch {
    pub scene_id: String,
    pub origin: (usize, usize),
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
    pub image_label: DomainLabel,
    pub pseudo_mask: Vec<u8>,
}

pub fn patch_key(p: &Patch) -> String {
    format!("{}@{},{}", p.scene_id, p.origin.0, p.origin.1)
}

/// Pair patches with their pseudo masks; any patch without one is a
/// rejection listing the offending ids.
pub fn build_pseudo_training_set(
    patches: &[Patch],
    mut pseudo_mask_of: impl FnMut(&Patch) -> Option<Vec<u8>>,
) -> Result<Vec<PseudoLabeledPatch>, RefineError> {
    let mut out = Vec::with_capacity(patches.len());
    let mut missing = Vec::new();
    for p in patches {
        match pseudo_mask_of(p) {
            Some(mask) if mask.len() == p.size * p.size => out.push(PseudoLabeledPatch {
                scene_id: p.scene_id.clone(),
                origin: p.origin,
                channels: p.channels,
                size: p.size,
                data: p.data.clone(),
                image_label: p.image_label,
                pseudo_mask: mask,
            }),
            _ => missing.push(patch_key(p)),
        }
    }
    if !missing.is_empty() {
        return Err(RefineError::MissingPseudoMasks(missing));
    }
    Ok(out)
}

// ---- configs ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive epochs without a validation-F1 improvement before the
    /// learning rate is divided by `lr_drop_factor`.
    pub patience: usize,
    pub lr_drop_factor: f64,
    pub aux_loss_weight: f64,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            patience: 3,
            lr_drop_factor: 10.0,
            aux_loss_weight: 1.0,
            base_width: 32,
            depth: 5,
            seed: 3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.epochs == 0 || self.batch_size == 0 || self.base_width == 0 {
            return Err(RefineError::BadConfig("epochs/batch_size/base_width must be positive".into()));
        }
        if self.depth < 2 {
            return Err(RefineError::BadConfig("depth must be at least 2".into()));
        }
        if self.patience == 0 || self.lr_drop_factor <= 1.0 {
            return Err(RefineError::BadConfig("patience >= 1 and lr_drop_factor > 1 required".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.aux_loss_weight >= 0.0) {
            return Err(RefineError::BadConfig("lr/aux_loss_weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub label_fraction: f64,
    pub lr: f64,
    pub freeze_encoder: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            label_fraction: 0.01,
            lr: 1e-5,
            freeze_encoder: true,
            epochs: 10,
            batch_size: 64,
            seed: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub aux_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
}

pub fn write_epoch_csv(path: &Path, trace: &[EpochRecord]) -> Result<(), IoError> {
    let mut out = String::from("epoch,train_loss,aux_loss,val_f1,lr\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.aux_loss, r.val_f1, r.lr
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Fs { path: parent.into(), source })?;
    }
    std::fs::write(path, out).map_err(|source| IoError::Fs { path: path.into(), source })
}

pub struct TrainedSegNet {
    pub net: SegNet,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

// ---- training internals ----

struct MaskedBatch {
    x: Vec<f32>,
    masks: Vec<f32>,
    labels: Vec<f32>,
    b: usize,
    c: usize,
    p: usize,
}

fn assemble_masked(data: &[(&[f32], &[u8], DomainLabel)], c: usize, p: usize) -> MaskedBatch {
    let b = data.len();
    let mut x = Vec::with_capacity(b * c * p * p);
    let mut masks = Vec::with_capacity(b * p * p);
    let mut labels = Vec::with_capacity(b);
    for (d, m, l) in data {
        x.extend_from_slice(d);
        masks.extend(m.iter().map(|&v| v as f32));
        labels.push(l.value() as f32);
    }
    MaskedBatch { x, masks, labels, b, c, p }
}

/// Pixel BCE + weighted auxiliary image-level BCE; returns (total, pix, aux).
fn seg_loss(
    g: &mut Graph,
    net: &SegNet,
    bound: &Bound,
    batch: &MaskedBatch,
    aux_weight: f64,
) -> (NodeId, f64, f64) {
    let x = g.constant(batch.x.clone(), &[batch.b, batch.c, batch.p, batch.p]);
    let (pix_logits, aux_logit) = net.forward(g, bound, x);
    let probs = g.sigmoid(pix_logits);
    let t = g.constant(batch.masks.clone(), &[batch.b, 1, batch.p, batch.p]);

    let ln_p = gl::ln_eps(g, probs);
    let pos = g.mul(t, ln_p);
    let om_t = gl::one_minus(g, t);
    let om_p = gl::one_minus(g, probs);
    let ln_q = gl::ln_eps(g, om_p);
    let neg_term = g.mul(om_t, ln_q);
    let sum = g.add(pos, neg_term);
    let mean = g.mean_all(sum);
    let pix_loss = g.neg(mean);

    let p_true = gl::prob_of_label(g, aux_logit, &batch.labels);
    let aux_loss = gl::nll_term(g, p_true);

    let weighted = g.mul_scalar(aux_loss, aux_weight as f32);
    let total = g.add(pix_loss, weighted);
    let pix_v = g.scalar_value(pix_loss) as f64;
    let aux_v = g.scalar_value(aux_loss) as f64;
    (total, pix_v, aux_v)
}

/// Micro F1 of thresholded predictions over validation patches with ground
/// truth.
pub fn val_f1(net: &SegNet, val: &[Patch]) -> Result<f64, RefineError> {
    let mut pooled = Confusion::default();
    let mut any = false;
    for p in val {
        let Some(truth) = &p.pixel_mask else { continue };
        any = true;
        let probs = net.predict_probs(&p.data, 1, p.size);
        let pred: Vec<u8> = probs.iter().map(|&v| u8::from(v > 0.5)).collect();
        pooled.merge(&confusion(&pred, truth, None).expect("same shape"));
    }
    if !any {
        return Err(RefineError::Empty("validation patches with ground truth"));
    }
    let (f1, _) = f1_accuracy(&pooled).map_err(|_| RefineError::Empty("validation pixels"))?;
    Ok(f1)
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    mut net: SegNet,
    psize: usize,
    items: &[(&[f32], &[u8], DomainLabel)],
    val: &[Patch],
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    patience: Option<(usize, f64)>,
    aux_weight: f64,
    trainable: impl Fn(&str) -> bool + Copy,
    seed: u64,
) -> Result<TrainedSegNet, RefineError> {
    let mut opt = Adam::new(net.params(), 0.9, 0.999);
    let mut rng = Rng::seed_stream(seed, 0x455048);
    let mut order: Vec<usize> = (0..items.len()).collect();

    let mut trace = Vec::new();
    let mut lr = base_lr;
    // Baseline eval of the starting parameters: the saved checkpoint is the
    // argmax over everything observed, so fine-tuning can never hand back a
    // net worse on validation than the one it started from.
    let mut best_f1 = val_f1(&net, val)?;
    let mut best_epoch = 0usize;
    let mut best_params = net.params().clone();
    let mut stale = 0usize;

    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut pix_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let rows: Vec<(&[f32], &[u8], DomainLabel)> = chunk.iter().map(|&i| items[i]).collect();
            let batch = assemble_masked(&rows, net.cfg.channels, psize);
            let mut g = Graph::new();
            let bound = net.params.bind_where(&mut g, trainable);
            let (total, pix_v, aux_v) = seg_loss(&mut g, &net, &bound, &batch, aux_weight);
            if !(pix_v.is_finite() && aux_v.is_finite()) {
                return Err(RefineError::NonFinite(epoch));
            }
            pix_sum += pix_v;
            aux_sum += aux_v;
            batches += 1;
            let grads = g.backward(total);
            let gvecs: Vec<Option<Vec<f32>>> = bound
                .ids
                .iter()
                .map(|&id| grads.get(id).map(|gid| g.data(gid).to_vec()))
                .collect();
            opt.step(net.params_mut(), &gvecs, lr as f32);
        }
        let f1 = val_f1(&net, val)?;
        trace.push(EpochRecord {
            epoch,
            train_loss: pix_sum / batches.max(1) as f64,
            aux_loss: aux_sum / batches.max(1) as f64,
            val_f1: f1,
            lr,
        });
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = epoch;
            best_params = net.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if let Some((patience_epochs, factor)) = patience {
                if stale >= patience_epochs {
                    lr /= factor;
                    stale = 0;
                }
            }
        }
    }
    net.load_params(best_params)?;
    Ok(TrainedSegNet { net, trace, best_epoch, best_val_f1: best_f1 })
}

/// Train on pseudo masks with the plateau schedule, keeping the
/// best-validation-F1 checkpoint.
pub fn train_fcdplus(
    pseudo: &[PseudoLabeledPatch],
    val: &[Patch],
    cfg: &RefineConfig,
) -> Result<TrainedSegNet, RefineError> {
    cfg.validate()?;
    if pseudo.is_empty() {
        return Err(RefineError::Empty("pseudo-labeled training patches"));
    }
    let channels = pseudo[0].channels;
    let net = SegNet::new(
        SegNetCfg { channels, base_width: cfg.base_width, depth: cfg.depth },
        cfg.seed,
    );
    let items: Vec<(&[f32], &[u8], DomainLabel)> = pseudo
        .iter()
        .map(|p| (p.data.as_slice(), p.pseudo_mask.as_slice(), p.image_label))
        .collect();
    let psize = pseudo[0].size;
    run_epochs(
        net,
        psize,
        &items,
        val,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        Some((cfg.patience, cfg.lr_drop_factor)),
        cfg.aux_loss_weight,
        |_| true,
        cfg.seed,
    )
}

/// Stratified (image label x biome) sample of ceil(fraction * N) patch
/// indices, deterministic per seed.
pub fn select_labeled_fraction(
    patches: &[Patch],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, RefineError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(RefineError::BadFraction(fraction));
    }
    if patches.is_empty() {
        return Err(RefineError::Empty("patches to sample from"));
    }
    let total = ((fraction * patches.len() as f64).ceil() as usize).min(patches.len());
    let mut by_key: BTreeMap<(String, u8), Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        let key = (p.biome.clone().unwrap_or_else(|| "unknown".into()), p.image_label.value());
        by_key.entry(key).or_default().push(i);
    }
    let strata: Vec<Vec<usize>> = by_key.into_values().collect();

    // largest-remainder apportionment over strata sizes, capped by capacity
    let n = patches.len();
    let mut counts: Vec<usize> = strata.iter().map(|v| v.len() * total / n).collect();
    let mut remainders: Vec<(usize, usize)> = strata
        .iter()
        .enumerate()
        .map(|(k, v)| (k, (v.len() * total) % n))
        .collect();
    remainders.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut leftover = total - counts.iter().sum::<usize>();
    for (k, _) in remainders {
        if leftover == 0 {
            break;
        }
        if counts[k] < strata[k].len() {
            counts[k] += 1;
            leftover -= 1;
        }
    }
    while leftover > 0 {
        let mut progressed = false;
        for (k, v) in strata.iter().enumerate() {
            if leftover > 0 && counts[k] < v.len() {
                counts[k] += 1;
                leftover -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut rng = Rng::seed_stream(seed, 0x465241);
    let mut out = Vec::with_capacity(total);
    for (k, v) in strata.iter().enumerate() {
        let mut ids = v.clone();
        rng.shuffle(&mut ids);
        out.extend_from_slice(&ids[..counts[k]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Fine-tune on real pixel labels; with `freeze_encoder` the encoder
/// parameters stay bit-identical.
pub fn finetune(
    net: &SegNet,
    labeled: &[&Patch],
    val: &[Patch],
    cfg: &FinetuneConfig,
) -> Result<TrainedSegNet, RefineError> {
    if labeled.is_empty() {
        return Err(RefineError::Empty("labeled subset"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(RefineError::BadConfig("epochs/batch_size must be positive".into()));
    }
    for p in labeled {
        if p.pixel_mask.is_none() {
            return Err(RefineError::MissingRealMask(patch_key(p)));
        }
    }
    let mut work = SegNet::new(net.cfg, 0);
    work.load_params(net.params().clone())?;
    let items: Vec<(&[f32], &[u8], DomainLabel)> = labeled
        .iter()
        .map(|p| (p.data.as_slice(), p.pixel_mask.as_deref().unwrap(), p.image_label))
        .collect();
    let freeze = cfg.freeze_encoder;
    let psize = labeled[0].size;
    run_epochs(
        work,
        psize,
        &items,
        val,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        None,
        0.0,
        move |name| !freeze || !name.starts_with(ENCODER_PREFIX),
        cfg.seed,
    )
}

/// Tile a normalized scene, predict per-patch probabilities, threshold at
/// 0.5, and stitch back to scene shape.
pub fn predict_scene(net: &SegNet, scene: &Scene, patch_size: usize) -> Result<SceneMask, RefineError> {
    let tiling = crate::data::tile_scene(scene, patch_size, TileOptions { drop_nodata_over: None })?;
    let mut tiles: Vec<((usize, usize), Vec<u8>)> = Vec::with_capacity(tiling.patches.len());
    for p in &tiling.patches {
        let probs = net.predict_probs(&p.data, 1, p.size);
        let mask: Vec<u8> = probs.iter().map(|&v| u8::from(v > 0.5)).collect();
        tiles.push((p.origin, mask));
    }
    let refs: Vec<((usize, usize), &[u8])> = tiles.iter().map(|(o, m)| (*o, m.as_slice())).collect();
    Ok(mask::stitch_masks(&refs, patch_size, scene.height, scene.width)?)
}

//! Adversarial training: per-step discriminator/generator updates, the
//! stratified batch sampler, validation-F1 checkpoint selection, and the
//! loss trace.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fcd_tensor::graph::{Graph, NodeId};
use fcd_tensor::optim::Adam;
use fcd_tensor::params::ParamSet;
use fcd_tensor::rng::Rng;

use crate::data::Patch;
use crate::io::IoError;
use crate::mask;

use super::graph_losses as gl;
use super::losses::LossWeights;
use super::nets::{Discriminator, DiscriminatorCfg, Generator, GeneratorCfg};
use super::GanError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversarialVariant {
    /// The logistic objective exactly as formulated.
    #[serde(rename = "logistic")]
    Logistic,
    /// Wasserstein critic with a gradient penalty on interpolates, as used
    /// by the original fixed-point translation code base.
    #[serde(rename = "gradient-penalty")]
    GradientPenalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenAdvForm {
    /// G maximizes log D(fake) (stable default).
    #[serde(rename = "non-saturating")]
    NonSaturating,
    /// G minimizes log(1 - D(fake)) (the literal fake terms).
    #[serde(rename = "saturating")]
    Saturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub d_steps_per_g_step: u32,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub adversarial_variant: AdversarialVariant,
    pub gen_adv_form: GenAdvForm,
    pub weights: LossWeights,
    pub base_width: usize,
    pub res_blocks: usize,
    /// Linear decay of both learning rates over the second half of training.
    pub lr_decay: bool,
    pub gp_weight: f64,
    /// Grid resolution for the validation pseudo-mask F1 used in model
    /// selection.
    pub val_grid_points: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            iterations: 200_000,
            batch_size: 16,
            g_lr: 1e-4,
            d_lr: 1e-4,
            d_steps_per_g_step: 5,
            seed: 1,
            checkpoint_every: 5_000,
            adversarial_variant: AdversarialVariant::Logistic,
            gen_adv_form: GenAdvForm::NonSaturating,
            weights: LossWeights::default(),
            base_width: 64,
            res_blocks: 6,
            lr_decay: true,
            gp_weight: 10.0,
            val_grid_points: 256,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        if self.iterations == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(GanError::BadConfig("iterations/batch_size/checkpoint_every must be positive".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(GanError::BadConfig("d_steps_per_g_step must be at least 1".into()));
        }
        if self.base_width == 0 || self.val_grid_points == 0 {
            return Err(GanError::BadConfig("base_width/val_grid_points must be positive".into()));
        }
        if !(self.g_lr.is_finite() && self.g_lr >= 0.0 && self.d_lr.is_finite() && self.d_lr >= 0.0) {
            return Err(GanError::BadConfig("learning rates must be finite and non-negative".into()));
        }
        if !(self.gp_weight.is_finite() && self.gp_weight >= 0.0) {
            return Err(GanError::BadConfig("gp_weight must be finite and non-negative".into()));
        }
        self.weights.validate().map_err(|e| GanError::BadConfig(e.to_string()))?;
        Ok(())
    }
}

/// One training step's loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub adv: f64,
    pub cls_r: f64,
    pub cls_f: f64,
    pub cyc: f64,
    pub id: f64,
    pub l_d: f64,
    pub l_g: f64,
}

pub fn write_val_history_csv(path: &Path, history: &[(u64, f64)]) -> Result<(), IoError> {
    let mut out = String::from("iteration,val_f1\n");
    for (it, f1) in history {
        out.push_str(&format!("{it},{f1}\n"));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Fs { path: parent.into(), source })?;
    }
    std::fs::write(path, out).map_err(|source| IoError::Fs { path: path.into(), source })
}

pub fn write_trace_csv(path: &Path, trace: &[LossRecord]) -> Result<(), IoError> {
    let mut out = String::from("iteration,adv,cls_r,cls_f,cyc,id,L_D,L_G\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration, r.adv, r.cls_r, r.cls_f, r.cyc, r.id, r.l_d, r.l_g
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Fs { path: parent.into(), source })?;
    }
    std::fs::write(path, out).map_err(|source| IoError::Fs { path: path.into(), source })
}

/// Draws batches mixing clear and cloudy patches whenever both exist.
pub struct StratifiedSampler {
    cloudy: Vec<usize>,
    clear: Vec<usize>,
    pos_cloudy: usize,
    pos_clear: usize,
    rng: Rng,
}

impl StratifiedSampler {
    pub fn new(patches: &[Patch], seed: u64) -> Self {
        let mut cloudy = Vec::new();
        let mut clear = Vec::new();
        for (i, p) in patches.iter().enumerate() {
            if p.image_label.is_cloudy() {
                cloudy.push(i);
            } else {
                clear.push(i);
            }
        }
        let mut rng = Rng::seed_stream(seed, 0x53414d50);
        rng.shuffle(&mut cloudy);
        rng.shuffle(&mut clear);
        StratifiedSampler { cloudy, clear, pos_cloudy: 0, pos_clear: 0, rng }
    }

    fn draw_from(pool: &mut [usize], pos: &mut usize, rng: &mut Rng, n: usize, out: &mut Vec<usize>) {
        for _ in 0..n {
            if *pos >= pool.len() {
                rng.shuffle(pool);
                *pos = 0;
            }
            debug_assert!(!pool.is_empty());
            out.push(pool[*pos]);
            *pos += 1;
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.cloudy.is_empty() {
            Self::draw_from(&mut self.clear, &mut self.pos_clear, &mut self.rng, n, &mut out);
        } else if self.clear.is_empty() {
            Self::draw_from(&mut self.cloudy, &mut self.pos_cloudy, &mut self.rng, n, &mut out);
        } else {
            let n_cloudy = n.div_ceil(2);
            Self::draw_from(&mut self.cloudy, &mut self.pos_cloudy, &mut self.rng, n_cloudy, &mut out);
            Self::draw_from(&mut self.clear, &mut self.pos_clear, &mut self.rng, n - n_cloudy, &mut out);
        }
        out
    }
}

struct BatchArrays {
    x: Vec<f32>,
    labels: Vec<f32>,
    b: usize,
    c: usize,
    p: usize,
}

fn assemble(batch: &[&Patch]) -> Result<BatchArrays, GanError> {
    let Some(first) = batch.first() else {
        return Err(GanError::EmptyBatch);
    };
    let (c, p) = (first.channels, first.size);
    let mut x = Vec::with_capacity(batch.len() * c * p * p);
    let mut labels = Vec::with_capacity(batch.len());
    for patch in batch {
        if patch.channels != c || patch.size != p {
            return Err(GanError::BadConfig(format!(
                "mixed patch shapes in batch: {}x{} vs {}x{}",
                patch.channels, patch.size, c, p
            )));
        }
        x.extend_from_slice(&patch.data);
        labels.push(patch.image_label.value() as f32);
    }
    Ok(BatchArrays { x, labels, b: batch.len(), c, p })
}

fn finite_or(component: &'static str, iteration: u64, v: f64) -> Result<f64, GanError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GanError::NonFinite { iteration, component })
    }
}

fn sample_targets(rng: &mut Rng, b: usize) -> Vec<f32> {
    (0..b).map(|_| rng.below(2) as f32).collect()
}

fn grads_for(
    g: &mut Graph,
    grads: &fcd_tensor::graph::Gradients,
    ids: &[NodeId],
) -> Vec<Option<Vec<f32>>> {
    ids.iter().map(|&id| grads.get(id).map(|gid| g.data(gid).to_vec())).collect()
}

#[allow(clippy::too_many_arguments)]
fn discriminator_update(
    batch: &BatchArrays,
    gen: &Generator,
    disc: &mut Discriminator,
    d_opt: &mut Adam,
    cfg: &GanTrainConfig,
    iteration: u64,
    lr_d: f32,
    rng: &mut Rng,
) -> Result<(f64, f64, f64), GanError> {
    let mut g = Graph::new();
    let gb = gen.params().bind(&mut g, false);
    let db = disc.params().bind(&mut g, true);
    let x = g.constant(batch.x.clone(), &[batch.b, batch.c, batch.p, batch.p]);
    let cy = sample_targets(rng, batch.b);

    let fake_same = gen.forward(&mut g, &gb, x, &batch.labels);
    let fake_cross = gen.forward(&mut g, &gb, x, &cy);
    let fake_cross_data = g.data(fake_cross).to_vec();

    let real_out = disc.forward(&mut g, &db, x);
    let fs_out = disc.forward(&mut g, &db, fake_same);
    let fc_out = disc.forward(&mut g, &db, fake_cross);

    let pt_real = gl::prob_of_label(&mut g, real_out.cls_logit, &batch.labels);
    let cls_r = gl::cls_real_term(&mut g, pt_real);

    let (adv_value, l_d) = match cfg.adversarial_variant {
        AdversarialVariant::Logistic => {
            let s_r = gl::scores01(&mut g, real_out.adv_logits);
            let s_fs = gl::scores01(&mut g, fs_out.adv_logits);
            let s_fc = gl::scores01(&mut g, fc_out.adv_logits);
            let adv = gl::adversarial_term(&mut g, s_r, s_fs, s_fc);
            let l_d = gl::disc_objective(&mut g, adv, cls_r, cfg.weights.lambda_cls);
            (g.scalar_value(adv) as f64, l_d)
        }
        AdversarialVariant::GradientPenalty => {
            let s_r = gl::raw_scores(&mut g, real_out.adv_logits);
            let s_fs = gl::raw_scores(&mut g, fs_out.adv_logits);
            let s_fc = gl::raw_scores(&mut g, fc_out.adv_logits);
            let m_r = g.mean_all(s_r);
            let m_fs = g.mean_all(s_fs);
            let m_fc = g.mean_all(s_fc);
            let fakes = g.add(m_fs, m_fc);
            let half_fakes = g.mul_scalar(fakes, 0.5);
            let adv = g.sub(m_r, half_fakes);

            // gradient penalty on interpolates between real and cross fakes
            let mut xh = Vec::with_capacity(batch.x.len());
            let per = batch.c * batch.p * batch.p;
            for bi in 0..batch.b {
                let eps = rng.uniform_f32();
                for i in 0..per {
                    let idx = bi * per + i;
                    xh.push(eps * batch.x[idx] + (1.0 - eps) * fake_cross_data[idx]);
                }
            }
            let xh = g.leaf(xh, &[batch.b, batch.c, batch.p, batch.p]);
            let h_out = disc.forward(&mut g, &db, xh);
            let s_h = gl::raw_scores(&mut g, h_out.adv_logits);
            let total = g.sum_all(s_h);
            let inner = g.backward(total);
            let gx = inner.get(xh).expect("interpolate gradient");
            let sq = g.mul(gx, gx);
            let per_sample = g.sum_per_sample(sq);
            let nrm = g.sqrt(per_sample);
            let centered = g.add_scalar(nrm, -1.0);
            let pen_sq = g.mul(centered, centered);
            let pen = g.mean_all(pen_sq);

            let neg_adv = g.neg(adv);
            let weighted_cls = g.mul_scalar(cls_r, cfg.weights.lambda_cls as f32);
            let weighted_pen = g.mul_scalar(pen, cfg.gp_weight as f32);
            let partial = g.add(neg_adv, weighted_cls);
            let l_d = g.add(partial, weighted_pen);
            (g.scalar_value(adv) as f64, l_d)
        }
    };

    let cls_r_value = finite_or("cls_r", iteration, g.scalar_value(cls_r) as f64)?;
    let adv_value = finite_or("adv", iteration, adv_value)?;
    let l_d_value = finite_or("L_D", iteration, g.scalar_value(l_d) as f64)?;

    let grads = g.backward(l_d);
    let gvecs = grads_for(&mut g, &grads, &db.ids);
    d_opt.step(disc.params_mut(), &gvecs, lr_d);
    Ok((adv_value, cls_r_value, l_d_value))
}

#[allow(clippy::too_many_arguments)]
fn generator_update(
    batch: &BatchArrays,
    gen: &mut Generator,
    disc: &Discriminator,
    g_opt: &mut Adam,
    cfg: &GanTrainConfig,
    iteration: u64,
    lr_g: f32,
    rng: &mut Rng,
) -> Result<(f64, f64, f64, f64), GanError> {
    let mut g = Graph::new();
    let gb = gen.params().bind(&mut g, true);
    let db = disc.params().bind(&mut g, false);
    let x = g.constant(batch.x.clone(), &[batch.b, batch.c, batch.p, batch.p]);
    let cy = sample_targets(rng, batch.b);

    let fake_same = gen.forward(&mut g, &gb, x, &batch.labels);
    let fake_cross = gen.forward(&mut g, &gb, x, &cy);
    let fs_out = disc.forward(&mut g, &db, fake_same);
    let fc_out = disc.forward(&mut g, &db, fake_cross);

    let adv_term = match cfg.adversarial_variant {
        AdversarialVariant::Logistic => {
            let s_fs = gl::scores01(&mut g, fs_out.adv_logits);
            let s_fc = gl::scores01(&mut g, fc_out.adv_logits);
            match cfg.gen_adv_form {
                GenAdvForm::NonSaturating => {
                    let l1 = gl::ln_eps(&mut g, s_fs);
                    let l2 = gl::ln_eps(&mut g, s_fc);
                    let s = g.add(l1, l2);
                    let m = g.mean_all(s);
                    g.neg(m)
                }
                GenAdvForm::Saturating => {
                    let o1 = gl::one_minus(&mut g, s_fs);
                    let l1 = gl::ln_eps(&mut g, o1);
                    let o2 = gl::one_minus(&mut g, s_fc);
                    let l2 = gl::ln_eps(&mut g, o2);
                    let s = g.add(l1, l2);
                    g.mean_all(s)
                }
            }
        }
        AdversarialVariant::GradientPenalty => {
            let s_fs = gl::raw_scores(&mut g, fs_out.adv_logits);
            let s_fc = gl::raw_scores(&mut g, fc_out.adv_logits);
            let m1 = g.mean_all(s_fs);
            let m2 = g.mean_all(s_fc);
            let s = g.add(m1, m2);
            g.mul_scalar(s, -0.5)
        }
    };

    let pt_cross = gl::prob_of_label(&mut g, fc_out.cls_logit, &cy);
    let pt_same = gl::prob_of_label(&mut g, fs_out.cls_logit, &batch.labels);
    let cls_f = gl::cls_fake_term(&mut g, pt_cross, pt_same);

    let recon_cross = gen.forward(&mut g, &gb, fake_cross, &batch.labels);
    let recon_same = gen.forward(&mut g, &gb, fake_same, &batch.labels);
    let cyc = gl::cycle_term(&mut g, x, recon_cross, recon_same);
    let id_loss = gl::identity_term(&mut g, x, fake_same);

    let l_g = gl::gen_objective(&mut g, adv_term, cls_f, cyc, id_loss, &cfg.weights);

    let cls_f_value = finite_or("cls_f", iteration, g.scalar_value(cls_f) as f64)?;
    let cyc_value = finite_or("cyc", iteration, g.scalar_value(cyc) as f64)?;
    let id_value = finite_or("id", iteration, g.scalar_value(id_loss) as f64)?;
    let l_g_value = finite_or("L_G", iteration, g.scalar_value(l_g) as f64)?;

    let grads = g.backward(l_g);
    let gvecs = grads_for(&mut g, &grads, &gb.ids);
    g_opt.step(gen.params_mut(), &gvecs, lr_g);
    Ok((cls_f_value, cyc_value, id_value, l_g_value))
}

/// d_steps discriminator updates followed by one generator update, all on
/// the given batch. Target labels are drawn uniformly per sub-step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[&Patch],
    gen: &mut Generator,
    disc: &mut Discriminator,
    g_opt: &mut Adam,
    d_opt: &mut Adam,
    cfg: &GanTrainConfig,
    iteration: u64,
    lr_g: f32,
    lr_d: f32,
    rng: &mut Rng,
) -> Result<LossRecord, GanError> {
    let arrays = assemble(batch)?;
    let mut adv = 0.0;
    let mut cls_r = 0.0;
    let mut l_d = 0.0;
    for _ in 0..cfg.d_steps_per_g_step {
        let (a, c, l) = discriminator_update(&arrays, gen, disc, d_opt, cfg, iteration, lr_d, rng)?;
        adv = a;
        cls_r = c;
        l_d = l;
    }
    let (cls_f, cyc, id, l_g) =
        generator_update(&arrays, gen, disc, g_opt, cfg, iteration, lr_g, rng)?;
    Ok(LossRecord { iteration, adv, cls_r, cls_f, cyc, id, l_d, l_g })
}

/// Learning rate at `iteration`: constant for the first half, linear to zero
/// over the second.
pub fn lr_at(iteration: u64, total: u64, base: f64, decay: bool) -> f64 {
    if !decay || total <= 1 {
        return base;
    }
    let half = total / 2;
    if iteration <= half {
        base
    } else {
        base * (total - iteration) as f64 / (total - half) as f64
    }
}

#[derive(Clone, Debug)]
pub struct SelectedCheckpoint {
    pub iteration: u64,
    pub val_f1: f64,
    pub params: ParamSet,
}

pub struct TrainedGan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub trace: Vec<LossRecord>,
    /// (iteration, validation pseudo-mask F1), including iteration 0.
    pub val_history: Vec<(u64, f64)>,
    pub selected: SelectedCheckpoint,
    pub diverged: Option<(u64, String)>,
}

fn val_pseudo_f1(gen: &Generator, val_cloudy: &[&Patch], grid_points: usize) -> Result<f64, GanError> {
    let sel = mask::select_threshold(gen, val_cloudy, grid_points)?;
    Ok(sel.f1)
}

/// Full training loop with periodic validation and best-checkpoint
/// retention. Deterministic for a fixed config.
pub fn train_fcd(
    train_patches: &[Patch],
    val_patches: &[Patch],
    cfg: &GanTrainConfig,
) -> Result<TrainedGan, GanError> {
    cfg.validate()?;
    if train_patches.is_empty() {
        return Err(GanError::EmptyBatch);
    }
    let channels = train_patches[0].channels;
    let patch_size = train_patches[0].size;
    if !patch_size.is_multiple_of(8) {
        return Err(GanError::BadConfig(format!("patch size {patch_size} must be divisible by 8")));
    }

    let mut gen = Generator::new(
        GeneratorCfg { channels, base_width: cfg.base_width, res_blocks: cfg.res_blocks },
        cfg.seed,
    );
    let mut disc =
        Discriminator::new(DiscriminatorCfg { channels, base_width: cfg.base_width }, cfg.seed ^ 0x5a5a);
    let mut g_opt = Adam::new(gen.params(), 0.5, 0.999);
    let mut d_opt = Adam::new(disc.params(), 0.5, 0.999);
    let mut sampler = StratifiedSampler::new(train_patches, cfg.seed);
    let mut rng = Rng::seed_stream(cfg.seed, 0x545247);

    let val_cloudy: Vec<&Patch> = val_patches
        .iter()
        .filter(|p| p.image_label.is_cloudy() && p.pixel_mask.is_some())
        .collect();

    let mut trace = Vec::new();
    let mut val_history = Vec::new();
    let mut selected = SelectedCheckpoint { iteration: 0, val_f1: f64::NEG_INFINITY, params: gen.params().clone() };
    if !val_cloudy.is_empty() {
        let f1 = val_pseudo_f1(&gen, &val_cloudy, cfg.val_grid_points)?;
        val_history.push((0, f1));
        selected = SelectedCheckpoint { iteration: 0, val_f1: f1, params: gen.params().clone() };
    }

    let mut diverged = None;
    for it in 1..=cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&Patch> = idx.iter().map(|&i| &train_patches[i]).collect();
        let lr_g = lr_at(it, cfg.iterations, cfg.g_lr, cfg.lr_decay) as f32;
        let lr_d = lr_at(it, cfg.iterations, cfg.d_lr, cfg.lr_decay) as f32;
        match train_step(&batch, &mut gen, &mut disc, &mut g_opt, &mut d_opt, cfg, it, lr_g, lr_d, &mut rng)
        {
            Ok(rec) => trace.push(rec),
            Err(GanError::NonFinite { iteration, component }) => {
                diverged = Some((iteration, component.to_string()));
                break;
            }
            Err(other) => return Err(other),
        }
        if (it % cfg.checkpoint_every == 0 || it == cfg.iterations) && !val_cloudy.is_empty() {
            let f1 = val_pseudo_f1(&gen, &val_cloudy, cfg.val_grid_points)?;
            val_history.push((it, f1));
            if f1 > selected.val_f1 {
                selected = SelectedCheckpoint { iteration: it, val_f1: f1, params: gen.params().clone() };
            }
        }
    }
    if selected.val_f1 == f64::NEG_INFINITY {
        // no validation material: keep the final parameters
        selected = SelectedCheckpoint {
            iteration: trace.last().map(|r| r.iteration).unwrap_or(0),
            val_f1: f64::NAN,
            params: gen.params().clone(),
        };
    }
    Ok(TrainedGan { generator: gen, discriminator: disc, trace, val_history, selected, diverged })
}

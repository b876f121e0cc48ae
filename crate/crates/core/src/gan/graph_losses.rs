//! The loss formulas assembled on the autodiff tape. The training loop uses
//! exactly these builders, so oracle tests that drive them with constant
//! tensors are pinning the same code path the optimizer differentiates.

use fcd_tensor::graph::{Graph, NodeId};

use super::losses::LossWeights;

pub(crate) const LOG_EPS_F32: f32 = 1e-8;

pub fn ln_eps(g: &mut Graph, x: NodeId) -> NodeId {
    let shifted = g.add_scalar(x, LOG_EPS_F32);
    g.ln(shifted)
}

pub fn one_minus(g: &mut Graph, x: NodeId) -> NodeId {
    let n = g.neg(x);
    g.add_scalar(n, 1.0)
}

/// Eq-1-shaped adversarial value from per-sample scores in (0,1):
/// mean_b( ln s_real + ln(1 - s_fake_same) + ln(1 - s_fake_cross) ).
pub fn adversarial_term(g: &mut Graph, s_real: NodeId, s_fake_same: NodeId, s_fake_cross: NodeId) -> NodeId {
    let ln_r = ln_eps(g, s_real);
    let om_fs = one_minus(g, s_fake_same);
    let ln_fs = ln_eps(g, om_fs);
    let om_fc = one_minus(g, s_fake_cross);
    let ln_fc = ln_eps(g, om_fc);
    let s1 = g.add(ln_r, ln_fs);
    let per = g.add(s1, ln_fc);
    g.mean_all(per)
}

/// mean_b( -ln p ) for per-sample true-class probabilities.
pub fn nll_term(g: &mut Graph, p_true: NodeId) -> NodeId {
    let l = ln_eps(g, p_true);
    let n = g.neg(l);
    g.mean_all(n)
}

/// Real-image classification term of the discriminator objective.
pub fn cls_real_term(g: &mut Graph, p_true: NodeId) -> NodeId {
    nll_term(g, p_true)
}

/// Fake-image classification term: cross- plus same-domain conditioning.
pub fn cls_fake_term(g: &mut Graph, p_cross: NodeId, p_same: NodeId) -> NodeId {
    let a = nll_term(g, p_cross);
    let b = nll_term(g, p_same);
    g.add(a, b)
}

/// Mean-per-element L1 between two same-shape tensors.
pub fn l1_term(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    let d = g.sub(x, y);
    let a = g.abs(d);
    g.mean_all(a)
}

/// Both cycle reconstructions against the input.
pub fn cycle_term(g: &mut Graph, x: NodeId, recon_cross: NodeId, recon_same: NodeId) -> NodeId {
    let a = l1_term(g, x, recon_cross);
    let b = l1_term(g, x, recon_same);
    g.add(a, b)
}

/// Same-domain translation against the input.
pub fn identity_term(g: &mut Graph, x: NodeId, same_translation: NodeId) -> NodeId {
    l1_term(g, x, same_translation)
}

/// L_D = -adv + lambda_cls * cls_real.
pub fn disc_objective(g: &mut Graph, adv: NodeId, cls_real: NodeId, lambda_cls: f64) -> NodeId {
    let n = g.neg(adv);
    let w = g.mul_scalar(cls_real, lambda_cls as f32);
    g.add(n, w)
}

/// L_G = adv_term + lambda_cls*cls_fake + lambda_cyc*cyc + lambda_id*id.
pub fn gen_objective(
    g: &mut Graph,
    adv_term: NodeId,
    cls_fake: NodeId,
    cyc: NodeId,
    id: NodeId,
    w: &LossWeights,
) -> NodeId {
    let wc = g.mul_scalar(cls_fake, w.lambda_cls as f32);
    let wy = g.mul_scalar(cyc, w.lambda_cyc as f32);
    let wi = g.mul_scalar(id, w.lambda_id as f32);
    let t1 = g.add(adv_term, wc);
    let t2 = g.add(t1, wy);
    g.add(t2, wi)
}

/// p(label | x) from a cloudy logit: c*sigmoid + (1-c)*(1-sigmoid).
pub fn prob_of_label(g: &mut Graph, cls_logit: NodeId, labels: &[f32]) -> NodeId {
    let p = g.sigmoid(cls_logit);
    let c = g.constant(labels.to_vec(), &[labels.len()]);
    let cp = g.mul(c, p);
    let omc = one_minus(g, c);
    let omp = one_minus(g, p);
    let rest = g.mul(omc, omp);
    g.add(cp, rest)
}

/// Per-sample mean of the sigmoid-squashed adversarial map.
pub fn scores01(g: &mut Graph, adv_logits: NodeId) -> NodeId {
    let s = g.sigmoid(adv_logits);
    g.mean_per_sample(s)
}

/// Per-sample mean of the raw adversarial map (critic variant).
pub fn raw_scores(g: &mut Graph, adv_logits: NodeId) -> NodeId {
    g.mean_per_sample(adv_logits)
}

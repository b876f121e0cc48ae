//! The five loss terms of fixed-point translation training and the two
//! combined objectives, as scalar functions. The training loop builds the
//! same formulas on the autodiff tape; these f64 versions are the reference
//! implementations the oracle tests pin down.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epsilon added inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{name} = {value} outside [0, 1]")]
    ScoreOutOfRange { name: &'static str, value: f64 },
    #[error("{name}: shape mismatch {got} vs {want}")]
    ShapeMismatch { name: &'static str, got: usize, want: usize },
}

/// Relative weights of the generator objective's tail terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cls: 1.0, lambda_cyc: 10.0, lambda_id: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::ScoreOutOfRange { name, value: v });
            }
        }
        Ok(())
    }
}

fn check_score(name: &'static str, value: f64) -> Result<(), LossError> {
    if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
        return Err(LossError::ScoreOutOfRange { name, value });
    }
    Ok(())
}

/// Adversarial value for one sample: realness of the real image plus
/// fakeness of the same- and cross-domain translations. Scores are means
/// over the adversarial head's map, in (0, 1). The discriminator maximizes
/// this; the generator minimizes the two fake terms.
pub fn adversarial_loss(d_real: f64, d_fake_same: f64, d_fake_cross: f64) -> Result<f64, LossError> {
    check_score("d_real", d_real)?;
    check_score("d_fake_same", d_fake_same)?;
    check_score("d_fake_cross", d_fake_cross)?;
    Ok((d_real + LOG_EPS).ln()
        + (1.0 - d_fake_same + LOG_EPS).ln()
        + (1.0 - d_fake_cross + LOG_EPS).ln())
}

pub fn adversarial_loss_batch(scores: &[(f64, f64, f64)]) -> Result<f64, LossError> {
    if scores.is_empty() {
        return Err(LossError::ShapeMismatch { name: "adversarial_loss_batch", got: 0, want: 1 });
    }
    let mut sum = 0.0;
    for &(r, fs, fc) in scores {
        sum += adversarial_loss(r, fs, fc)?;
    }
    Ok(sum / scores.len() as f64)
}

/// Real images must classify to their own domain: -log p(c_x | x).
pub fn domain_cls_loss_real(p_true_class: f64) -> Result<f64, LossError> {
    check_score("p(c_x|x)", p_true_class)?;
    Ok(-(p_true_class + LOG_EPS).ln())
}

/// Generated images must classify to the conditioning domain, for the
/// cross- and same-domain translations.
pub fn domain_cls_loss_fake(p_cross: f64, p_same: f64) -> Result<f64, LossError> {
    check_score("p(c_y|G(x,c_y))", p_cross)?;
    check_score("p(c_x|G(x,c_x))", p_same)?;
    Ok(-(p_cross + LOG_EPS).ln() - (p_same + LOG_EPS).ln())
}

fn mean_abs_diff(name: &'static str, x: &[f32], y: &[f32]) -> Result<f64, LossError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(LossError::ShapeMismatch { name, got: y.len(), want: x.len() });
    }
    let sum: f64 = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(sum / x.len() as f64)
}

/// Mean-per-element L1 reconstruction error of both cycle paths:
/// x vs G(G(x,c_y),c_x) plus x vs G(G(x,c_x),c_x).
pub fn cycle_consistency_loss(
    x: &[f32],
    recon_cross: &[f32],
    recon_same: &[f32],
) -> Result<f64, LossError> {
    Ok(mean_abs_diff("cycle(cross)", x, recon_cross)? + mean_abs_diff("cycle(same)", x, recon_same)?)
}

/// Mean-per-element L1 between x and its same-domain translation G(x, c_x).
pub fn conditional_identity_loss(x: &[f32], same_translation: &[f32]) -> Result<f64, LossError> {
    mean_abs_diff("identity", x, same_translation)
}

/// L_D = -L_adv + lambda_cls * L_cls_real.
pub fn discriminator_objective(adv: f64, cls_real: f64, lambda_cls: f64) -> f64 {
    -adv + lambda_cls * cls_real
}

/// L_G = adv_term + lambda_cls * L_cls_fake + lambda_cyc * L_cyc
///     + lambda_id * L_id. The adversarial term carries the generator's sign
/// convention (saturating or non-saturating per config).
pub fn generator_objective(adv_term: f64, cls_fake: f64, cyc: f64, id: f64, w: &LossWeights) -> f64 {
    adv_term + w.lambda_cls * cls_fake + w.lambda_cyc * cyc + w.lambda_id * id
}

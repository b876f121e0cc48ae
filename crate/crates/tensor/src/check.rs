//! Finite-difference gradient checking against the analytic backward pass.

/// Central-difference gradient of `f` at `theta`. The step is scaled by each
/// coordinate's magnitude so large and small parameters are probed alike.
pub fn central_diff_grad(mut f: impl FnMut(&[f32]) -> f64, theta: &[f32], h_base: f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let h = h_base * theta[i].abs().max(1.0) as f64;
        let orig = theta[i];
        probe[i] = (orig as f64 + h) as f32;
        let fp = f(&probe);
        probe[i] = (orig as f64 - h) as f32;
        let fm = f(&probe);
        probe[i] = orig;
        // Use the step actually realized after f32 rounding.
        let hp = probe_step(orig, h);
        grad[i] = (fp - fm) / (2.0 * hp);
    }
    grad
}

fn probe_step(orig: f32, h: f64) -> f64 {
    let up = (orig as f64 + h) as f32 as f64;
    let down = (orig as f64 - h) as f32 as f64;
    (up - down) / 2.0
}

/// L2 relative error between analytic and numerical gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|&n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x
        let theta = [0.5f32, -1.5, 2.0];
        let g = central_diff_grad(
            |t| t.iter().map(|&v| (v as f64) * (v as f64)).sum(),
            &theta,
            1e-4,
        );
        let expected: Vec<f64> = theta.iter().map(|&v| 2.0 * v as f64).collect();
        assert!(relative_error(&expected, &g) < 1e-6, "{g:?}");
    }
}

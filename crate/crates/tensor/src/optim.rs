//! Adam optimizer over a [`ParamSet`].

use crate::params::ParamSet;

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f32, beta2: f32) -> Self {
        let m = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        let v = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Adam { beta1, beta2, eps: 1e-8, t: 0, m, v }
    }

    /// One update. `grads[i] == None` leaves parameter i untouched (frozen or
    /// unused this step). A zero learning rate leaves parameters bit-identical.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>], lr: f32) {
        assert_eq!(grads.len(), params.len(), "grad/param count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let e = params.entry_mut(crate::params::ParamId(i));
            assert_eq!(g.len(), e.data.len(), "grad size mismatch for {}", e.name);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                e.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

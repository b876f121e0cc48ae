//! Layer building blocks over `ParamSet` + `Graph`.

use crate::graph::{Graph, NodeId};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::Rng;

pub fn he_normal(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| (rng.normal() * std) as f32).collect()
}

pub fn xavier_normal(rng: &mut Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| (rng.normal() * std) as f32).collect()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.register(
            &format!("{name}.w"),
            &[out_ch, in_ch, k, k],
            he_normal(rng, fan_in, out_ch * fan_in),
        );
        let b = bias.then(|| ps.register(&format!("{name}.b"), &[out_ch], vec![0.0; out_ch]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let y = g.conv2d(x, bound.id(self.w), self.stride, self.pad);
        match self.b {
            Some(b) => {
                let shape = g.shape(y).to_vec();
                let bb = g.broadcast_channels(bound.id(b), &shape);
                g.add(y, bb)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            &[out_f, in_f],
            xavier_normal(rng, in_f, out_f, out_f * in_f),
        );
        let b = bias.then(|| ps.register(&format!("{name}.b"), &[out_f], vec![0.0; out_f]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let y = g.linear(x, bound.id(self.w));
        match self.b {
            Some(b) => {
                let shape = g.shape(y).to_vec();
                let bb = g.broadcast_channels(bound.id(b), &shape);
                g.add(y, bb)
            }
            None => y,
        }
    }
}

/// Instance normalization with affine parameters, composed from primitive
/// ops so autodiff (of any order) falls out of the tape.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl InstanceNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.register(&format!("{name}.gamma"), &[channels], vec![1.0; channels]);
        let beta = ps.register(&format!("{name}.beta"), &[channels], vec![0.0; channels]);
        InstanceNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        let mu = g.mean_spatial(x);
        let mu_b = g.broadcast_spatial(mu, &shape);
        let centered = g.sub(x, mu_b);
        let sq = g.mul(centered, centered);
        let var = g.mean_spatial(sq);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.sqrt(var_eps);
        let inv = g.recip(std);
        let inv_b = g.broadcast_spatial(inv, &shape);
        let normed = g.mul(centered, inv_b);
        let gamma_b = g.broadcast_channels(bound.id(self.gamma), &shape);
        let beta_b = g.broadcast_channels(bound.id(self.beta), &shape);
        let scaled = g.mul(normed, gamma_b);
        g.add(scaled, beta_b)
    }
}

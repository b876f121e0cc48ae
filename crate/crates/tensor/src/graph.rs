//! Tape-based reverse-mode autodiff over eagerly evaluated f32 tensors.
//!
//! Every op records itself as a node; `backward` walks the tape in reverse
//! and builds the gradients *as new graph nodes*, so gradients are themselves
//! differentiable (needed for gradient-penalty style losses). The three
//! convolution primitives (forward, grad-wrt-input, grad-wrt-weight) form a
//! trilinear family whose members are each other's adjoints, which is what
//! makes higher-order differentiation close under the op set.
//!
//! Reductions accumulate in f64 before narrowing back to f32 so that means
//! over constant inputs are exact to f32 resolution. All kernels have fixed
//! loop order; rayon is only used across batch samples with disjoint output
//! slices, so results are bit-reproducible run to run.

use rayon::prelude::*;

use crate::kernels::{col2im_add, conv_out_dim, im2col, matmul_abt, matmul_acc, matmul_atb};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Detach,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f32),
    Recip(NodeId),
    Abs(NodeId),
    AbsGrad { x: NodeId, gy: NodeId },
    LeakyRelu { x: NodeId, alpha: f32 },
    LeakyReluGrad { x: NodeId, gy: NodeId, alpha: f32 },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    MeanPerSample(NodeId),
    SumPerSample(NodeId),
    MeanSpatial(NodeId),
    SumSpatial(NodeId),
    SumChannels(NodeId),
    BroadcastAll(NodeId),
    BroadcastPerSample(NodeId),
    BroadcastSpatial(NodeId),
    BroadcastChannels(NodeId),
    ConcatC(NodeId, NodeId),
    SliceC { x: NodeId, from: usize, to: usize },
    PadC { x: NodeId, before: usize, after: usize },
    UpsampleNearest2x(NodeId),
    DownSum2x2(NodeId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    // Input/kernel extents are recoverable from node shapes, so the bwd
    // variants only carry what the VJP rules need.
    Conv2dBwdX { gy: NodeId, w: NodeId, stride: usize, pad: usize },
    Conv2dBwdW { x: NodeId, gy: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId },
    LinearBwdX { gy: NodeId, w: NodeId },
    LinearBwdW { x: NodeId, gy: NodeId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Gradient table produced by [`Graph::backward`]; maps node ids to the
/// nodes holding their gradients.
pub struct Gradients {
    grads: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(id.0).copied().flatten()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "scalar_value on node of shape {:?}", n.shape);
        n.data[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { op, shape, data, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- leaves ----

    /// Trainable leaf: gradients will be computed for it.
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize]) -> NodeId {
        assert_eq!(numel(shape), data.len(), "leaf: shape/data mismatch");
        self.push(Op::Leaf, shape.to_vec(), data, true)
    }

    /// Constant leaf: no gradient tracked through it.
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> NodeId {
        assert_eq!(numel(shape), data.len(), "constant: shape/data mismatch");
        self.push(Op::Leaf, shape.to_vec(), data, false)
    }

    pub fn full(&mut self, value: f32, shape: &[usize]) -> NodeId {
        self.constant(vec![value; numel(shape)], shape)
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Detach, shape, data, false)
    }

    // ---- elementwise ----

    fn assert_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), shape, data, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), shape, data, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), shape, data, rg)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Neg(x), shape, data, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v + s).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::AddScalar(x), shape, data, rg)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * s).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::MulScalar(x, s), shape, data, rg)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| 1.0 / v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Recip(x), shape, data, rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.abs()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Abs(x), shape, data, rg)
    }

    fn abs_grad(&mut self, x: NodeId, gy: NodeId) -> NodeId {
        self.assert_same_shape(x, gy, "abs_grad");
        let data: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .zip(&self.nodes[gy.0].data)
            .map(|(&v, &g)| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(gy);
        self.push(Op::AbsGrad { x, gy }, shape, data, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f32) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::LeakyRelu { x, alpha }, shape, data, rg)
    }

    fn leaky_relu_grad(&mut self, x: NodeId, gy: NodeId, alpha: f32) -> NodeId {
        self.assert_same_shape(x, gy, "leaky_relu_grad");
        let data: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .zip(&self.nodes[gy.0].data)
            .map(|(&v, &g)| if v > 0.0 { g } else { alpha * g })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(gy);
        self.push(Op::LeakyReluGrad { x, gy, alpha }, shape, data, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Tanh(x), shape, data, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), shape, data, rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Ln(x), shape, data, rg)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(Op::Sqrt(x), shape, data, rg)
    }

    // ---- reductions and broadcasts ----

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let sum: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let n = self.nodes[x.0].data.len() as f64;
        let rg = self.rg(x);
        self.push(Op::MeanAll(x), vec![1], vec![(sum / n) as f32], rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let sum: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), vec![1], vec![sum as f32], rg)
    }

    fn per_sample(&self, x: NodeId) -> (usize, usize) {
        let shape = &self.nodes[x.0].shape;
        assert!(!shape.is_empty(), "per-sample op on scalar");
        let b = shape[0];
        (b, numel(shape) / b)
    }

    pub fn mean_per_sample(&mut self, x: NodeId) -> NodeId {
        let (b, per) = self.per_sample(x);
        let mut out = vec![0.0f32; b];
        for (bi, slot) in out.iter_mut().enumerate() {
            let sum: f64 = self.nodes[x.0].data[bi * per..(bi + 1) * per]
                .iter()
                .map(|&v| v as f64)
                .sum();
            *slot = (sum / per as f64) as f32;
        }
        let rg = self.rg(x);
        self.push(Op::MeanPerSample(x), vec![b], out, rg)
    }

    pub fn sum_per_sample(&mut self, x: NodeId) -> NodeId {
        let (b, per) = self.per_sample(x);
        let mut out = vec![0.0f32; b];
        for (bi, slot) in out.iter_mut().enumerate() {
            let sum: f64 = self.nodes[x.0].data[bi * per..(bi + 1) * per]
                .iter()
                .map(|&v| v as f64)
                .sum();
            *slot = sum as f32;
        }
        let rg = self.rg(x);
        self.push(Op::SumPerSample(x), vec![b], out, rg)
    }

    fn spatial_dims(&self, x: NodeId) -> (usize, usize, usize) {
        let shape = &self.nodes[x.0].shape;
        assert!(shape.len() >= 3, "spatial op needs [B,C,..], got {shape:?}");
        let (b, c) = (shape[0], shape[1]);
        (b, c, numel(shape) / (b * c))
    }

    /// [B,C,spatial..] -> [B,C] (mean over spatial dims); doubles as GAP.
    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let (b, c, sp) = self.spatial_dims(x);
        let mut out = vec![0.0f32; b * c];
        for (i, slot) in out.iter_mut().enumerate() {
            let sum: f64 = self.nodes[x.0].data[i * sp..(i + 1) * sp]
                .iter()
                .map(|&v| v as f64)
                .sum();
            *slot = (sum / sp as f64) as f32;
        }
        let rg = self.rg(x);
        self.push(Op::MeanSpatial(x), vec![b, c], out, rg)
    }

    pub fn sum_spatial(&mut self, x: NodeId) -> NodeId {
        let (b, c, sp) = self.spatial_dims(x);
        let mut out = vec![0.0f32; b * c];
        for (i, slot) in out.iter_mut().enumerate() {
            let sum: f64 = self.nodes[x.0].data[i * sp..(i + 1) * sp]
                .iter()
                .map(|&v| v as f64)
                .sum();
            *slot = sum as f32;
        }
        let rg = self.rg(x);
        self.push(Op::SumSpatial(x), vec![b, c], out, rg)
    }

    /// [B,C,rest..] -> [C], summing over batch and rest.
    pub fn sum_channels(&mut self, x: NodeId) -> NodeId {
        let shape = &self.nodes[x.0].shape;
        assert!(shape.len() >= 2, "sum_channels needs [B,C,..], got {shape:?}");
        let (b, c) = (shape[0], shape[1]);
        let rest = numel(shape) / (b * c);
        let mut acc = vec![0.0f64; c];
        for bi in 0..b {
            for (ci, slot) in acc.iter_mut().enumerate() {
                let base = (bi * c + ci) * rest;
                let sum: f64 = self.nodes[x.0].data[base..base + rest]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                *slot += sum;
            }
        }
        let out: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        let rg = self.rg(x);
        self.push(Op::SumChannels(x), vec![c], out, rg)
    }

    pub fn broadcast_all(&mut self, src: NodeId, target_shape: &[usize]) -> NodeId {
        assert_eq!(self.nodes[src.0].data.len(), 1, "broadcast_all needs scalar src");
        let v = self.nodes[src.0].data[0];
        let rg = self.rg(src);
        self.push(Op::BroadcastAll(src), target_shape.to_vec(), vec![v; numel(target_shape)], rg)
    }

    pub fn broadcast_per_sample(&mut self, src: NodeId, target_shape: &[usize]) -> NodeId {
        let b = target_shape[0];
        assert_eq!(self.nodes[src.0].shape, vec![b], "broadcast_per_sample src must be [B]");
        let per = numel(target_shape) / b;
        let mut out = vec![0.0f32; numel(target_shape)];
        for bi in 0..b {
            out[bi * per..(bi + 1) * per].fill(self.nodes[src.0].data[bi]);
        }
        let rg = self.rg(src);
        self.push(Op::BroadcastPerSample(src), target_shape.to_vec(), out, rg)
    }

    pub fn broadcast_spatial(&mut self, src: NodeId, target_shape: &[usize]) -> NodeId {
        assert!(target_shape.len() >= 3);
        let (b, c) = (target_shape[0], target_shape[1]);
        assert_eq!(self.nodes[src.0].shape, vec![b, c], "broadcast_spatial src must be [B,C]");
        let sp = numel(target_shape) / (b * c);
        let mut out = vec![0.0f32; numel(target_shape)];
        for i in 0..b * c {
            out[i * sp..(i + 1) * sp].fill(self.nodes[src.0].data[i]);
        }
        let rg = self.rg(src);
        self.push(Op::BroadcastSpatial(src), target_shape.to_vec(), out, rg)
    }

    pub fn broadcast_channels(&mut self, src: NodeId, target_shape: &[usize]) -> NodeId {
        assert!(target_shape.len() >= 2);
        let (b, c) = (target_shape[0], target_shape[1]);
        assert_eq!(self.nodes[src.0].shape, vec![c], "broadcast_channels src must be [C]");
        let rest = numel(target_shape) / (b * c);
        let mut out = vec![0.0f32; numel(target_shape)];
        for bi in 0..b {
            for ci in 0..c {
                out[(bi * c + ci) * rest..(bi * c + ci + 1) * rest].fill(self.nodes[src.0].data[ci]);
            }
        }
        let rg = self.rg(src);
        self.push(Op::BroadcastChannels(src), target_shape.to_vec(), out, rg)
    }

    // ---- channel structure ----

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(sa.len() >= 2 && sa.len() == sb.len(), "concat_c ranks {sa:?} vs {sb:?}");
        assert_eq!(sa[0], sb[0], "concat_c batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat_c trailing dims mismatch");
        let (bsz, c1, c2) = (sa[0], sa[1], sb[1]);
        let rest = numel(&sa) / (bsz * c1);
        let mut shape = sa.clone();
        shape[1] = c1 + c2;
        let mut out = vec![0.0f32; numel(&shape)];
        let per_out = (c1 + c2) * rest;
        for bi in 0..bsz {
            out[bi * per_out..bi * per_out + c1 * rest]
                .copy_from_slice(&self.nodes[a.0].data[bi * c1 * rest..(bi + 1) * c1 * rest]);
            out[bi * per_out + c1 * rest..(bi + 1) * per_out]
                .copy_from_slice(&self.nodes[b.0].data[bi * c2 * rest..(bi + 1) * c2 * rest]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatC(a, b), shape, out, rg)
    }

    pub fn slice_c(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(sx.len() >= 2 && from < to && to <= sx[1], "slice_c {from}..{to} of {sx:?}");
        let (bsz, c) = (sx[0], sx[1]);
        let rest = numel(&sx) / (bsz * c);
        let mut shape = sx.clone();
        shape[1] = to - from;
        let mut out = vec![0.0f32; numel(&shape)];
        let per_out = (to - from) * rest;
        for bi in 0..bsz {
            let src = &self.nodes[x.0].data[(bi * c + from) * rest..(bi * c + to) * rest];
            out[bi * per_out..(bi + 1) * per_out].copy_from_slice(src);
        }
        let rg = self.rg(x);
        self.push(Op::SliceC { x, from, to }, shape, out, rg)
    }

    fn pad_c(&mut self, x: NodeId, before: usize, after: usize) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        assert!(sx.len() >= 2);
        let (bsz, c) = (sx[0], sx[1]);
        let rest = numel(&sx) / (bsz * c);
        let mut shape = sx.clone();
        shape[1] = before + c + after;
        let mut out = vec![0.0f32; numel(&shape)];
        let per_out = shape[1] * rest;
        for bi in 0..bsz {
            let dst = &mut out[bi * per_out + before * rest..bi * per_out + (before + c) * rest];
            dst.copy_from_slice(&self.nodes[x.0].data[bi * c * rest..(bi + 1) * c * rest]);
        }
        let rg = self.rg(x);
        self.push(Op::PadC { x, before, after }, shape, out, rg)
    }

    // ---- resampling ----

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        assert_eq!(sx.len(), 4, "upsample_nearest2x needs [B,C,H,W]");
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let shape = vec![b, c, 2 * h, 2 * w];
        let mut out = vec![0.0f32; numel(&shape)];
        for plane in 0..b * c {
            let src = &self.nodes[x.0].data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let base = 2 * y * 2 * w + 2 * xx;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + 2 * w] = v;
                    dst[base + 2 * w + 1] = v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::UpsampleNearest2x(x), shape, out, rg)
    }

    fn down_sum2x2(&mut self, x: NodeId) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        assert_eq!(sx.len(), 4, "down_sum2x2 needs [B,C,H,W]");
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "down_sum2x2 needs even dims");
        let shape = vec![b, c, h / 2, w / 2];
        let mut out = vec![0.0f32; numel(&shape)];
        for plane in 0..b * c {
            let src = &self.nodes[x.0].data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h * w / 4..(plane + 1) * h * w / 4];
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let base = 2 * y * w + 2 * xx;
                    dst[y * (w / 2) + xx] = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::DownSum2x2(x), shape, out, rg)
    }

    // ---- convolution family ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 4, "conv2d x must be [B,Ci,H,W], got {sx:?}");
        assert_eq!(sw.len(), 4, "conv2d w must be [Co,Ci,kh,kw], got {sw:?}");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch: x {sx:?} w {sw:?}");
        let (b, ci, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wid, kw, stride, pad);
        let k = ci * kh * kw;
        let n = ho * wo;
        let xdata = &self.nodes[x.0].data;
        let wdata = &self.nodes[w.0].data;
        let mut out = vec![0.0f32; b * co * n];
        out.par_chunks_mut(co * n).enumerate().for_each(|(bi, ob)| {
            let mut cols = vec![0.0f32; k * n];
            im2col(&xdata[bi * ci * h * wid..(bi + 1) * ci * h * wid], ci, h, wid, kh, kw, stride, pad, &mut cols);
            matmul_acc(wdata, &cols, ob, co, k, n);
        });
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::Conv2d { x, w, stride, pad }, vec![b, co, ho, wo], out, rg)
    }

    /// Gradient of conv2d w.r.t. its input: maps gy [B,Co,Ho,Wo] back to [B,Ci,in_h,in_w].
    pub fn conv2d_bwd_x(
        &mut self,
        gy: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> NodeId {
        let sg = self.nodes[gy.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sg.len(), 4);
        assert_eq!(sw.len(), 4);
        assert_eq!(sg[1], sw[0], "conv2d_bwd_x: gy channels vs w out-channels");
        let (b, co, ho, wo) = (sg[0], sg[1], sg[2], sg[3]);
        let (_, ci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        assert_eq!(ho, conv_out_dim(in_h, kh, stride, pad), "conv2d_bwd_x height mismatch");
        assert_eq!(wo, conv_out_dim(in_w, kw, stride, pad), "conv2d_bwd_x width mismatch");
        let k = ci * kh * kw;
        let n = ho * wo;
        let gdata = &self.nodes[gy.0].data;
        let wdata = &self.nodes[w.0].data;
        let mut out = vec![0.0f32; b * ci * in_h * in_w];
        out.par_chunks_mut(ci * in_h * in_w).enumerate().for_each(|(bi, gx)| {
            let mut gcols = vec![0.0f32; k * n];
            matmul_atb(wdata, &gdata[bi * co * n..(bi + 1) * co * n], &mut gcols, co, k, n);
            col2im_add(&gcols, ci, in_h, in_w, kh, kw, stride, pad, gx);
        });
        let rg = self.rg(gy) || self.rg(w);
        self.push(Op::Conv2dBwdX { gy, w, stride, pad }, vec![b, ci, in_h, in_w], out, rg)
    }

    /// Gradient of conv2d w.r.t. its weights: [Co,Ci,kh,kw] from x and gy.
    pub fn conv2d_bwd_w(
        &mut self,
        x: NodeId,
        gy: NodeId,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        let sg = self.nodes[gy.0].shape.clone();
        assert_eq!(sx.len(), 4);
        assert_eq!(sg.len(), 4);
        assert_eq!(sx[0], sg[0], "conv2d_bwd_w batch mismatch");
        let (b, ci, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (_, co, ho, wo) = (sg[0], sg[1], sg[2], sg[3]);
        assert_eq!(ho, conv_out_dim(h, kh, stride, pad));
        assert_eq!(wo, conv_out_dim(wid, kw, stride, pad));
        let k = ci * kh * kw;
        let n = ho * wo;
        let xdata = &self.nodes[x.0].data;
        let gdata = &self.nodes[gy.0].data;
        let partials: Vec<Vec<f32>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let mut cols = vec![0.0f32; k * n];
                im2col(&xdata[bi * ci * h * wid..(bi + 1) * ci * h * wid], ci, h, wid, kh, kw, stride, pad, &mut cols);
                let mut gw = vec![0.0f32; co * k];
                matmul_abt(&gdata[bi * co * n..(bi + 1) * co * n], &cols, &mut gw, co, n, k);
                gw
            })
            .collect();
        let mut out = vec![0.0f32; co * k];
        for p in &partials {
            for (o, &v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(gy);
        self.push(Op::Conv2dBwdW { x, gy, stride, pad }, vec![co, ci, kh, kw], out, rg)
    }

    // ---- linear family ----

    /// x [B,I] * w [O,I]^T -> [B,O]
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 2, "linear x must be [B,I]");
        assert_eq!(sw.len(), 2, "linear w must be [O,I]");
        assert_eq!(sx[1], sw[1], "linear in-features mismatch");
        let (b, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0f32; b * o];
        matmul_abt(&self.nodes[x.0].data, &self.nodes[w.0].data, &mut out, b, i, o);
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::Linear { x, w }, vec![b, o], out, rg)
    }

    fn linear_bwd_x(&mut self, gy: NodeId, w: NodeId) -> NodeId {
        let sg = self.nodes[gy.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let (b, o, i) = (sg[0], sg[1], sw[1]);
        assert_eq!(o, sw[0]);
        let mut out = vec![0.0f32; b * i];
        matmul_acc(&self.nodes[gy.0].data, &self.nodes[w.0].data, &mut out, b, o, i);
        let rg = self.rg(gy) || self.rg(w);
        self.push(Op::LinearBwdX { gy, w }, vec![b, i], out, rg)
    }

    fn linear_bwd_w(&mut self, x: NodeId, gy: NodeId) -> NodeId {
        let sx = self.nodes[x.0].shape.clone();
        let sg = self.nodes[gy.0].shape.clone();
        let (b, i, o) = (sx[0], sx[1], sg[1]);
        assert_eq!(b, sg[0]);
        let mut out = vec![0.0f32; o * i];
        matmul_atb(&self.nodes[gy.0].data, &self.nodes[x.0].data, &mut out, b, o, i);
        let rg = self.rg(x) || self.rg(gy);
        self.push(Op::LinearBwdW { x, gy }, vec![o, i], out, rg)
    }

    // ---- autodiff ----

    /// Reverse-mode gradients of a scalar node. Gradient computations are
    /// recorded on the tape, so the returned gradients can be differentiated
    /// again (e.g. for gradient penalties).
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward needs a scalar loss");
        let snapshot = self.nodes.len();
        let mut grads: Vec<Option<NodeId>> = vec![None; snapshot];
        let seed = self.constant(vec![1.0], &[1]);
        grads[loss.0] = Some(seed);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Detach => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, a, g);
                    self.acc(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, a, g);
                    let ng = self.neg(g);
                    self.acc(&mut grads, b, ng);
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(g, b);
                        self.acc(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.mul(g, a);
                        self.acc(&mut grads, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::AddScalar(a) => self.acc(&mut grads, a, g),
                Op::MulScalar(a, s) => {
                    let ga = self.mul_scalar(g, s);
                    self.acc(&mut grads, a, ga);
                }
                Op::Recip(a) => {
                    // d(1/x) = -1/x^2
                    let y = NodeId(id);
                    let y2 = self.mul(y, y);
                    let n = self.neg(y2);
                    let ga = self.mul(g, n);
                    self.acc(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let ga = self.abs_grad(a, g);
                    self.acc(&mut grads, a, ga);
                }
                Op::AbsGrad { x, gy } => {
                    // Linear in gy; derivative w.r.t. x is zero a.e.
                    if self.rg(gy) {
                        let gg = self.abs_grad(x, g);
                        self.acc(&mut grads, gy, gg);
                    }
                }
                Op::LeakyRelu { x, alpha } => {
                    let ga = self.leaky_relu_grad(x, g, alpha);
                    self.acc(&mut grads, x, ga);
                }
                Op::LeakyReluGrad { x, gy, alpha } => {
                    if self.rg(gy) {
                        let gg = self.leaky_relu_grad(x, g, alpha);
                        self.acc(&mut grads, gy, gg);
                    }
                }
                Op::Tanh(a) => {
                    let y = NodeId(id);
                    let y2 = self.mul(y, y);
                    let m = self.mul_scalar(y2, -1.0);
                    let one_minus = self.add_scalar(m, 1.0);
                    let ga = self.mul(g, one_minus);
                    self.acc(&mut grads, a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = NodeId(id);
                    let m = self.mul_scalar(y, -1.0);
                    let one_minus = self.add_scalar(m, 1.0);
                    let s = self.mul(y, one_minus);
                    let ga = self.mul(g, s);
                    self.acc(&mut grads, a, ga);
                }
                Op::Ln(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r);
                    self.acc(&mut grads, a, ga);
                }
                Op::Sqrt(a) => {
                    let y = NodeId(id);
                    let r = self.recip(y);
                    let half = self.mul_scalar(r, 0.5);
                    let ga = self.mul(g, half);
                    self.acc(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].data.len() as f32;
                    let scaled = self.mul_scalar(g, 1.0 / n);
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_all(scaled, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_all(g, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::MeanPerSample(a) => {
                    let (_, per) = self.per_sample(a);
                    let scaled = self.mul_scalar(g, 1.0 / per as f32);
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_per_sample(scaled, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::SumPerSample(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_per_sample(g, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::MeanSpatial(a) => {
                    let (_, _, sp) = self.spatial_dims(a);
                    let scaled = self.mul_scalar(g, 1.0 / sp as f32);
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_spatial(scaled, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::SumSpatial(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_spatial(g, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::SumChannels(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let ga = self.broadcast_channels(g, &shape);
                    self.acc(&mut grads, a, ga);
                }
                Op::BroadcastAll(a) => {
                    let ga = self.sum_all(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::BroadcastPerSample(a) => {
                    let ga = self.sum_per_sample(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::BroadcastSpatial(a) => {
                    let ga = self.sum_spatial(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::BroadcastChannels(a) => {
                    let ga = self.sum_channels(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::ConcatC(a, b) => {
                    let ca = self.nodes[a.0].shape[1];
                    let cb = self.nodes[b.0].shape[1];
                    if self.rg(a) {
                        let ga = self.slice_c(g, 0, ca);
                        self.acc(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.slice_c(g, ca, ca + cb);
                        self.acc(&mut grads, b, gb);
                    }
                }
                Op::SliceC { x, from, to } => {
                    let c = self.nodes[x.0].shape[1];
                    let ga = self.pad_c(g, from, c - to);
                    self.acc(&mut grads, x, ga);
                }
                Op::PadC { x, before, after } => {
                    let c_out = self.nodes[id].shape[1];
                    let ga = self.slice_c(g, before, c_out - after);
                    self.acc(&mut grads, x, ga);
                }
                Op::UpsampleNearest2x(a) => {
                    let ga = self.down_sum2x2(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::DownSum2x2(a) => {
                    let ga = self.upsample_nearest2x(g);
                    self.acc(&mut grads, a, ga);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    if self.rg(x) {
                        let (h, wid) = (self.nodes[x.0].shape[2], self.nodes[x.0].shape[3]);
                        let gx = self.conv2d_bwd_x(g, w, stride, pad, h, wid);
                        self.acc(&mut grads, x, gx);
                    }
                    if self.rg(w) {
                        let (kh, kw) = (self.nodes[w.0].shape[2], self.nodes[w.0].shape[3]);
                        let gw = self.conv2d_bwd_w(x, g, stride, pad, kh, kw);
                        self.acc(&mut grads, w, gw);
                    }
                }
                Op::Conv2dBwdX { gy, w, stride, pad, .. } => {
                    if self.rg(gy) {
                        let gg = self.conv2d(g, w, stride, pad);
                        self.acc(&mut grads, gy, gg);
                    }
                    if self.rg(w) {
                        let (kh, kw) = (self.nodes[w.0].shape[2], self.nodes[w.0].shape[3]);
                        let gw = self.conv2d_bwd_w(g, gy, stride, pad, kh, kw);
                        self.acc(&mut grads, w, gw);
                    }
                }
                Op::Conv2dBwdW { x, gy, stride, pad, .. } => {
                    if self.rg(x) {
                        let (h, wid) = (self.nodes[x.0].shape[2], self.nodes[x.0].shape[3]);
                        let gx = self.conv2d_bwd_x(gy, g, stride, pad, h, wid);
                        self.acc(&mut grads, x, gx);
                    }
                    if self.rg(gy) {
                        let gg = self.conv2d(x, g, stride, pad);
                        self.acc(&mut grads, gy, gg);
                    }
                }
                Op::Linear { x, w } => {
                    if self.rg(x) {
                        let gx = self.linear_bwd_x(g, w);
                        self.acc(&mut grads, x, gx);
                    }
                    if self.rg(w) {
                        let gw = self.linear_bwd_w(x, g);
                        self.acc(&mut grads, w, gw);
                    }
                }
                Op::LinearBwdX { gy, w } => {
                    if self.rg(gy) {
                        let gg = self.linear(g, w);
                        self.acc(&mut grads, gy, gg);
                    }
                    if self.rg(w) {
                        let gw = self.linear_bwd_w(g, gy);
                        self.acc(&mut grads, w, gw);
                    }
                }
                Op::LinearBwdW { x, gy } => {
                    if self.rg(x) {
                        let gx = self.linear_bwd_x(gy, g);
                        self.acc(&mut grads, x, gx);
                    }
                    if self.rg(gy) {
                        let gg = self.linear(x, g);
                        self.acc(&mut grads, gy, gg);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&mut self, grads: &mut [Option<NodeId>], id: NodeId, g: NodeId) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        grads[id.0] = Some(match grads[id.0] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }
}

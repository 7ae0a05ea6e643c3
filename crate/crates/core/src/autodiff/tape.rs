use std::collections::BTreeMap;

use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

/// Operation tags, used for reporting and fault injection in gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    BatchMatMulNt,
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,
    LayerNorm,
    Gelu,
    GatherRows,
    ConcatRows,
    BroadcastBatch,
    SplitHeads,
    MergeHeads,
    SliceLast,
    Reshape,
    Patchify,
    GatherPairs,
    CrossEntropy,
    Sum,
    Mean,
    Sign,
    Clamp,
}

impl OpKind {
    /// Every recorded operation except leaves.
    pub const OPS: [OpKind; 24] = [
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::BatchMatMulNt,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::BroadcastBatch,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::SliceLast,
        OpKind::Reshape,
        OpKind::Patchify,
        OpKind::GatherPairs,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Sign,
        OpKind::Clamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::BatchMatMulNt => "batch_matmul_nt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::BroadcastBatch => "broadcast_batch",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
            OpKind::SliceLast => "slice_last",
            OpKind::Reshape => "reshape",
            OpKind::Patchify => "patchify",
            OpKind::GatherPairs => "gather_pairs",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Sign => "sign",
            OpKind::Clamp => "clamp",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::OPS)
            .find(|k| k.name() == name)
    }
}

pub(super) enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
        slope: Vec<f64>,
    },
    GatherRows {
        x: Var,
        indices: Vec<Vec<usize>>,
    },
    ConcatRows(Var, Var),
    BroadcastBatch(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Patchify {
        x: Var,
        patch: usize,
    },
    GatherPairs {
        table: Var,
        indices: Vec<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Sign,
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul { transpose_b: false, .. } => OpKind::BatchMatMul,
            Op::BatchMatMul { transpose_b: true, .. } => OpKind::BatchMatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::BroadcastBatch(..) => OpKind::BroadcastBatch,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Patchify { .. } => OpKind::Patchify,
            Op::GatherPairs { .. } => OpKind::GatherPairs,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Sign => OpKind::Sign,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) needs_grad: bool,
}

/// Gradient tape. Nodes are appended in evaluation order, so the node list
/// is always topologically sorted.
#[derive(Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
    consumed: bool,
    fault: Option<OpKind>,
}

/// Gradients of every grad-tracking leaf, keyed by its [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong (scaled by 1.5).
    /// Only useful as a negative control for gradient checking.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            fault: Some(kind),
            ..Self::default()
        }
    }

    /// Grad-tracking leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.record(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.record(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn record(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`. Every grad-tracking leaf gets
    /// an entry, zero-filled when it does not reach the loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward() already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(id, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let shape = node.value.shape();
                let t = match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => Tensor::new(shape, g)?,
                    None => Tensor::zeros(shape),
                };
                out.grads.insert(Var(id), t);
            }
        }
        Ok(out)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let needs = |v: &Var| nodes[v.0].needs_grad;
        let val = |v: &Var| &nodes[v.0].value;

        match &nodes[id].op {
            Op::Leaf | Op::Sign => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.last_dim());
                if needs(a) {
                    gemm_nt_acc(g, bv.data(), acc(grads, *a, av.numel()), m, n, k);
                }
                if needs(b) {
                    gemm_tn_acc(av.data(), g, acc(grads, *b, bv.numel()), m, k, n);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (val(a), val(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if needs(a) {
                    let ga = acc(grads, *a, av.numel());
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let bi = &bv.data()[i * sb..(i + 1) * sb];
                        let gai = &mut ga[i * sa..(i + 1) * sa];
                        if *transpose_b {
                            gemm_acc(gi, bi, gai, m, n, k);
                        } else {
                            gemm_nt_acc(gi, bi, gai, m, n, k);
                        }
                    }
                }
                if needs(b) {
                    let gb = acc(grads, *b, bv.numel());
                    for i in 0..batch {
                        let gi = &g[i * sc..(i + 1) * sc];
                        let ai = &av.data()[i * sa..(i + 1) * sa];
                        let gbi = &mut gb[i * sb..(i + 1) * sb];
                        if *transpose_b {
                            gemm_tn_acc(gi, ai, gbi, m, n, k);
                        } else {
                            gemm_tn_acc(ai, gi, gbi, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    add_into(acc(grads, *a, g.len()), g, 1.0);
                }
                if needs(b) {
                    add_into(acc(grads, *b, g.len()), g, sign);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let ga = acc(grads, *a, g.len());
                    for ((x, &gv), &bv) in ga.iter_mut().zip(g).zip(val(b).data()) {
                        *x += gv * bv;
                    }
                }
                if needs(b) {
                    let gb = acc(grads, *b, g.len());
                    for ((x, &gv), &av) in gb.iter_mut().zip(g).zip(val(a).data()) {
                        *x += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(x) {
                    add_into(acc(grads, *x, g.len()), g, *c);
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let n = out.last_dim();
                    let gx = acc(grads, *x, g.len());
                    for ((y, gy), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in gxr.iter_mut().zip(y).zip(gy) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gam = val(gamma).data();
                if needs(gamma) {
                    let gg = acc(grads, *gamma, d);
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(gy).zip(xh) {
                            *o += a * b;
                        }
                    }
                }
                if needs(beta) {
                    let gb = acc(grads, *beta, d);
                    for gy in g.chunks(d) {
                        add_into(gb, gy, 1.0);
                    }
                }
                if needs(x) {
                    let gx = acc(grads, *x, g.len());
                    let inv_d = 1.0 / d as f64;
                    for (((gy, xh), gxr), &rs) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).zip(rstd) {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = gy[j] * gam[j];
                            mean_g += gh;
                            mean_gx += gh * xh[j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for j in 0..d {
                            let gh = gy[j] * gam[j];
                            gxr[j] += rs * (gh - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Gelu { x, slope } => {
                if needs(x) {
                    let gx = acc(grads, *x, g.len());
                    for ((o, &gv), &s) in gx.iter_mut().zip(g).zip(slope) {
                        *o += gv * s;
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                if needs(x) {
                    let xv = val(x);
                    let d = xv.last_dim();
                    let p = xv.shape()[xv.rank() - 2];
                    let k = indices[0].len();
                    let gx = acc(grads, *x, xv.numel());
                    for (b, idx) in indices.iter().enumerate() {
                        for (t, &src) in idx.iter().enumerate() {
                            let from = &g[(b * k + t) * d..(b * k + t + 1) * d];
                            add_into(&mut gx[(b * p + src) * d..(b * p + src + 1) * d], from, 1.0);
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let (av, bv) = (val(a), val(b));
                let d = out.last_dim();
                let (ra, rb) = (av.shape()[av.rank() - 2], bv.shape()[bv.rank() - 2]);
                let outer = av.numel() / (ra * d);
                for o in 0..outer {
                    let base = o * (ra + rb) * d;
                    if needs(a) {
                        let ga = acc(grads, *a, av.numel());
                        add_into(&mut ga[o * ra * d..(o + 1) * ra * d], &g[base..base + ra * d], 1.0);
                    }
                    if needs(b) {
                        let gb = acc(grads, *b, bv.numel());
                        add_into(
                            &mut gb[o * rb * d..(o + 1) * rb * d],
                            &g[base + ra * d..base + (ra + rb) * d],
                            1.0,
                        );
                    }
                }
            }
            Op::BroadcastBatch(x) => {
                if needs(x) {
                    let n = val(x).numel();
                    let gx = acc(grads, *x, n);
                    for chunk in g.chunks(n) {
                        add_into(gx, chunk, 1.0);
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if needs(x) {
                    let gx = acc(grads, *x, g.len());
                    let s = val(x).shape();
                    heads_permute(g, gx, s[0], s[1], *heads, s[2] / heads, false);
                }
            }
            Op::MergeHeads { x, heads } => {
                if needs(x) {
                    let gx = acc(grads, *x, g.len());
                    let s = out.shape();
                    heads_permute(g, gx, s[0], s[1], *heads, s[2] / heads, true);
                }
            }
            Op::SliceLast { x, start } => {
                if needs(x) {
                    let full = val(x).last_dim();
                    let len = out.last_dim();
                    let gx = acc(grads, *x, val(x).numel());
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * full + start..r * full + start + len], gr, 1.0);
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    add_into(acc(grads, *x, g.len()), g, 1.0);
                }
            }
            Op::Patchify { x, patch } => {
                if needs(x) {
                    let gx = acc(grads, *x, g.len());
                    let s = val(x).shape();
                    for (dst, src) in super::ops::patch_layout(s[0], s[1], s[2], *patch).enumerate() {
                        gx[src] += g[dst];
                    }
                }
            }
            Op::GatherPairs { table, indices } => {
                if needs(table) {
                    let ts = val(table).shape();
                    let (heads, size) = (ts[0], ts[1]);
                    let k = indices[0].len();
                    let gt = acc(grads, *table, val(table).numel());
                    let mut o = 0;
                    for idx in indices {
                        for h in 0..heads {
                            for &i in idx {
                                for &j in idx {
                                    gt[(h * size + i) * size + j] += g[o];
                                    o += 1;
                                }
                            }
                        }
                    }
                    debug_assert_eq!(o, indices.len() * heads * k * k);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(logits) {
                    let c = val(logits).last_dim();
                    let scale = g[0] / labels.len() as f64;
                    let gl = acc(grads, *logits, probs.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if needs(x) {
                    let n = val(x).numel();
                    let scale = if matches!(nodes[id].op, Op::Mean(..)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    acc(grads, *x, n).iter_mut().for_each(|v| *v += scale);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if needs(x) {
                    let gx = acc(grads, *x, g.len());
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(x).data()) {
                        if xv >= *lo && xv <= *hi {
                            *o += gv;
                        }
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Moves data between `[b, p, h·dh]` and `[b·h, p, dh]` layouts, accumulating
/// into `dst`. `merged_to_split` selects the direction.
pub(super) fn heads_permute(
    src: &[f64],
    dst: &mut [f64],
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
    merged_to_split: bool,
) {
    let d = heads * head_dim;
    for b in 0..batch {
        for i in 0..seq {
            for h in 0..heads {
                let merged = (b * seq + i) * d + h * head_dim;
                let split = ((b * heads + h) * seq + i) * head_dim;
                let (from, to) = if merged_to_split {
                    (merged, split)
                } else {
                    (split, merged)
                };
                for t in 0..head_dim {
                    dst[to + t] += src[from + t];
                }
            }
        }
    }
}

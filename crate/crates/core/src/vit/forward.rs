use rand::{Rng, RngCore};

use super::config::ModelConfig;
use super::params::{BlockVars, ParamVars, Params};
use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::policy::{influence_scores, layer_keep_count, random_input_drop, select_kept, DropPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which rows leave a self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub enum Keep {
    All,
    /// Explicit local row indices per batch entry (sorted, containing 0).
    Indices(Vec<Vec<usize>>),
    /// Class token plus the `k − 1` most influential rows, chosen from this block's attention.
    TopK(usize),
}

pub struct MsaOutput {
    pub x: Var,
    /// Post-softmax (and post-dropout) attention, `[b·h, p, p]`.
    pub attention: Var,
    /// Local row indices kept per batch entry, when rows were dropped.
    pub kept: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub policy: DropPolicy,
    pub mode: Mode,
    /// Copy every block's attention into the trace.
    pub record_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            policy: DropPolicy::None,
            mode: Mode::Eval,
            record_attention: false,
        }
    }

    pub fn train(policy: DropPolicy) -> Self {
        ForwardOptions {
            policy,
            mode: Mode::Train,
            record_attention: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    /// Sequence length entering the block.
    pub seq_len: usize,
    /// `[b·h, seq_len, seq_len]` when recorded.
    pub attention: Option<Tensor>,
    /// Original token positions leaving the block, per batch entry.
    pub kept: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[b, num_classes]`
    pub logits: Tensor,
    /// Positions surviving random input dropping, when it ran.
    pub input_kept: Option<Vec<Vec<usize>>>,
    pub blocks: Vec<BlockTrace>,
}

impl ForwardTrace {
    /// Sequence length entering each block.
    pub fn seq_lens(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.seq_len).collect()
    }

    /// Predicted class per example; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Splits a `[c, s, s]` image into `[(s/patch)², c·patch²]` rows.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim("patchify", s, &[patch]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let p = tape.patchify(x, patch)?;
    let out = tape.value(p).clone();
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, image_size: usize, patch: usize) -> Result<Tensor> {
    let grid = image_size / patch;
    if patches.shape() != [grid * grid, channels * patch * patch] {
        return Err(Error::dim(
            "unpatchify",
            patches.shape(),
            &[channels, image_size, image_size],
        ));
    }
    let mut tape = Tape::new();
    let probe = tape.leaf(Tensor::zeros(&[1, channels, image_size, image_size]));
    let p = tape.patchify(probe, patch)?;
    let weights = tape.constant(patches.clone().reshape(&[1, grid * grid, channels * patch * patch])?);
    let dot = tape.mul(p, weights)?;
    let loss = tape.sum(dot);
    // d(Σ patchify(x)·P)/dx routes each patch entry back to its pixel.
    let grads = tape.backward(loss)?;
    let img = grads.get(probe).expect("leaf gradient").clone();
    img.reshape(&[channels, image_size, image_size])
}

/// Class token prepended to projected patches, position table added.
/// `patches: [b, p₀, c·patch²] → [b, p₀ + 1, d]`
pub fn embed(tape: &mut Tape, config: &ModelConfig, vars: &ParamVars, patches: Var) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 3 || s[1] != config.num_patches() || s[2] != config.patch_dim() {
        return Err(Error::dim("embed", &s, &[config.num_patches(), config.patch_dim()]));
    }
    let batch = s[0];
    let tokens = tape.matmul(patches, vars.patch_embed)?;
    let cls = tape.reshape(vars.class_token, &[1, config.dim])?;
    let cls = tape.broadcast_batch(cls, batch);
    let x = tape.concat_rows(cls, tokens)?;
    let pos = tape.broadcast_batch(vars.pos_embed, batch);
    tape.add(x, pos)
}

/// Multi-head self-attention with pre-norm and residual. When rows are
/// dropped, the selection applies to the attention output before the output
/// projection, and the residual takes the same rows of the block input.
///
/// `positions` holds each row's original token position (for the attention
/// bias); `dropout` is `(rate, rng)` and is only honoured when `rate > 0`.
#[allow(clippy::too_many_arguments)]
pub fn msa_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    block: &BlockVars,
    x: Var,
    positions: &[Vec<usize>],
    keep: Keep,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<MsaOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != config.dim || positions.len() != s[0] {
        return Err(Error::dim("msa_forward", &s, &[positions.len(), config.dim]));
    }
    let (batch, p, d) = (s[0], s[1], s[2]);
    let heads = config.heads;

    let xn = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LAYER_NORM_EPS)?;
    let qkv = tape.matmul(xn, block.w_qkv)?;
    let q = tape.slice_last(qkv, 0, d)?;
    let k = tape.slice_last(qkv, d, d)?;
    let v = tape.slice_last(qkv, 2 * d, d)?;
    let q = tape.split_heads(q, heads)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;

    let scores = tape.batch_matmul(q, k, true)?;
    let mut scores = tape.scale(scores, 1.0 / (config.head_dim() as f64).sqrt());
    if let Some(bias) = block.attn_bias {
        let b = tape.gather_pairs(bias, positions)?;
        scores = tape.add(scores, b)?;
    }
    let mut attention = tape.softmax_lastdim(scores)?;
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let survive = 1.0 / (1.0 - rate);
            let n = tape.value(attention).numel();
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { survive })
                .collect();
            let mask = tape.constant(Tensor::new(tape.shape(attention), mask)?);
            attention = tape.mul(attention, mask)?;
        }
    }

    let mixed = tape.batch_matmul(attention, v, false)?;
    let mixed = tape.merge_heads(mixed, heads)?;

    let kept = match keep {
        Keep::All => None,
        Keep::Indices(idx) => Some(idx),
        Keep::TopK(k) => {
            let a = tape.value(attention).data();
            let per = heads * p * p;
            let idx = (0..batch)
                .map(|b| select_kept(&influence_scores(&a[b * per..(b + 1) * per], heads, p), k))
                .collect::<Result<Vec<_>>>()?;
            Some(idx)
        }
    };
    let (mixed, residual) = match &kept {
        Some(idx) => (tape.gather_rows(mixed, idx)?, tape.gather_rows(x, idx)?),
        None => (mixed, x),
    };
    let projected = tape.matmul(mixed, block.w_proj)?;
    let x = tape.add(residual, projected)?;
    Ok(MsaOutput { x, attention, kept })
}

/// `x + GELU(LayerNorm(x)·W³)·W⁴`
pub fn mlp_forward(tape: &mut Tape, block: &BlockVars, x: Var) -> Result<Var> {
    let xn = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)?;
    let h = tape.matmul(xn, block.w_fc1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, block.w_fc2)?;
    tape.add(x, out)
}

/// Full forward pass on a `[b, c, s, s]` image batch, returning `[b, classes]` logits.
///
/// Eval mode ignores the policy and dropout and never touches `rng`.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ParamVars,
    images: Var,
    opts: &ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<(Var, ForwardTrace)> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1..] != config.image_shape() {
        return Err(Error::dim("forward", &s, &config.image_shape()));
    }
    let batch = s[0];
    let train = opts.mode == Mode::Train;
    let policy = if train { opts.policy } else { DropPolicy::None };

    let patches = tape.patchify(images, config.patch_size)?;
    let mut x = embed(tape, config, vars, patches)?;
    let mut positions: Vec<Vec<usize>> = vec![(0..config.seq_len()).collect(); batch];

    let mut input_kept = None;
    if let DropPolicy::RandomInput { rate } = policy {
        let kept: Vec<Vec<usize>> = (0..batch)
            .map(|_| random_input_drop(config.num_patches(), rate, &mut *rng))
            .collect();
        x = tape.gather_rows(x, &kept)?;
        positions = kept.clone();
        input_kept = Some(kept);
    }

    let mut blocks = Vec::with_capacity(config.depth);
    for block in &vars.blocks {
        let n = tape.shape(x)[1];
        let keep = match policy {
            DropPolicy::AttentionGuided { keep } => Keep::TopK(layer_keep_count(n, keep)),
            _ => Keep::All,
        };
        let dropout = (train && config.attn_dropout_rate > 0.0)
            .then_some((config.attn_dropout_rate, &mut *rng as &mut dyn RngCore));
        let out = msa_forward(tape, config, block, x, &positions, keep, dropout)?;
        if let Some(local) = &out.kept {
            positions = positions
                .iter()
                .zip(local)
                .map(|(pos, idx)| idx.iter().map(|&i| pos[i]).collect())
                .collect();
        }
        blocks.push(BlockTrace {
            seq_len: n,
            attention: opts.record_attention.then(|| tape.value(out.attention).clone()),
            kept: positions.clone(),
        });
        x = mlp_forward(tape, block, out.x)?;
    }

    let cls = tape.gather_rows(x, &vec![vec![0]; batch])?;
    let cls = tape.reshape(cls, &[batch, config.dim])?;
    let cls = tape.layer_norm(cls, vars.norm_gamma, vars.norm_beta, LAYER_NORM_EPS)?;
    let logits = tape.matmul(cls, vars.head)?;
    let trace = ForwardTrace {
        logits: tape.value(logits).clone(),
        input_kept,
        blocks,
    };
    Ok((logits, trace))
}

/// A model bound to its weights, with the whole-pass entry points the
/// attacks and the trainer use.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Params,
}

fn as_batch(images: &Tensor) -> Result<Tensor> {
    match images.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(images.shape());
            images.clone().reshape(&shape)
        }
        _ => Ok(images.clone()),
    }
}

impl<'a> Model<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a Params) -> Self {
        Model { config, params }
    }

    /// Forward pass only; accepts `[c, s, s]` or `[b, c, s, s]`.
    pub fn forward(&self, images: &Tensor, opts: &ForwardOptions, rng: &mut dyn RngCore) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, self.params, false);
        let x = tape.constant(as_batch(images)?);
        let (_, trace) = forward(&mut tape, self.config, &vars, x, opts, rng)?;
        Ok(trace)
    }

    /// Mean cross-entropy and its gradient with respect to the input batch.
    pub fn input_gradient(
        &self,
        images: &Tensor,
        labels: &[usize],
        opts: &ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, self.params, false);
        let x = tape.leaf(as_batch(images)?);
        let (logits, trace) = forward(&mut tape, self.config, &vars, x, opts, rng)?;
        let loss = tape.cross_entropy_logits(logits, labels)?;
        let value = tape.value(loss).item().expect("scalar");
        let mut grads = tape.backward(loss)?;
        let g = grads.take(x).expect("input is a leaf");
        Ok((value, g.reshape(images.shape())?, trace))
    }

    /// Mean cross-entropy and parameter gradients in [`Params::named`] order.
    pub fn param_gradients(
        &self,
        images: &Tensor,
        labels: &[usize],
        opts: &ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Vec<Tensor>, ForwardTrace)> {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, self.params, true);
        let x = tape.constant(as_batch(images)?);
        let (logits, trace) = forward(&mut tape, self.config, &vars, x, opts, rng)?;
        let loss = tape.cross_entropy_logits(logits, labels)?;
        let value = tape.value(loss).item().expect("scalar");
        let mut grads = tape.backward(loss)?;
        let out = vars
            .ordered()
            .into_iter()
            .map(|v| grads.take(v).expect("param is a leaf"))
            .collect();
        Ok((value, out, trace))
    }
}

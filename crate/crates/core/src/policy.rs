//! Which embeddings survive each block.
//!
//! Attention-guided dropping scores every embedding by how much attention mass
//! it sends to all queries (column sums of the head-averaged attention), keeps
//! the class token plus the top-scoring rest, and shrinks the sequence by a
//! constant fraction at every block. Random input dropping is the baseline:
//! one uniformly drawn subset of patches, fixed for the whole forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropPolicy {
    #[default]
    None,
    /// Drop a `rate` fraction of input patches before the first block.
    #[serde(alias = "random")]
    RandomInput { rate: f64 },
    /// Keep `keep` of the non-class embeddings after every block's attention.
    #[serde(alias = "agat")]
    AttentionGuided { keep: f64 },
}

impl DropPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DropPolicy::None => Ok(()),
            DropPolicy::RandomInput { rate } if (0.0..1.0).contains(&rate) => Ok(()),
            DropPolicy::RandomInput { rate } => Err(Error::Config(format!(
                "random input drop rate must be in [0, 1), got {rate}"
            ))),
            DropPolicy::AttentionGuided { keep } if keep > 0.0 && keep <= 1.0 => Ok(()),
            DropPolicy::AttentionGuided { keep } => Err(Error::Config(format!(
                "attention-guided keep fraction must be in (0, 1], got {keep}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DropPolicy::None => "none",
            DropPolicy::RandomInput { .. } => "random",
            DropPolicy::AttentionGuided { .. } => "agat",
        }
    }
}

/// Sequence lengths (class token included) produced by a policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropSchedule {
    /// Length entering the first block.
    pub input_len: usize,
    /// Length leaving each block.
    pub kept: Vec<usize>,
}

impl DropSchedule {
    /// `num_patches` excludes the class token.
    pub fn new(num_patches: usize, depth: usize, policy: &DropPolicy) -> Self {
        let full = num_patches + 1;
        match *policy {
            DropPolicy::None => DropSchedule {
                input_len: full,
                kept: vec![full; depth],
            },
            DropPolicy::RandomInput { rate } => {
                let n = 1 + random_keep_count(num_patches, rate);
                DropSchedule {
                    input_len: n,
                    kept: vec![n; depth],
                }
            }
            DropPolicy::AttentionGuided { keep } => {
                let mut kept = Vec::with_capacity(depth);
                let mut n = full;
                for _ in 0..depth {
                    n = layer_keep_count(n, keep);
                    kept.push(n);
                }
                DropSchedule { input_len: full, kept }
            }
        }
    }

    /// Length entering block `layer` (zero-based).
    pub fn incoming(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_len
        } else {
            self.kept[layer - 1]
        }
    }

    pub fn incoming_lengths(&self) -> Vec<usize> {
        (0..self.kept.len()).map(|l| self.incoming(l)).collect()
    }
}

/// Influence of every key embedding on all outputs: column sums of the
/// head-averaged `[heads, p, p]` attention stack (row-major slice).
pub fn influence_scores(attention: &[f64], heads: usize, p: usize) -> Vec<f64> {
    debug_assert_eq!(attention.len(), heads * p * p);
    let mut scores = vec![0.0; p];
    for row in attention.chunks(p) {
        for (s, &a) in scores.iter_mut().zip(row) {
            *s += a;
        }
    }
    let inv = 1.0 / heads as f64;
    scores.iter_mut().for_each(|s| *s *= inv);
    scores
}

/// Class token plus the `k - 1` highest-scoring other positions, ascending.
/// Ties go to the lower index.
pub fn select_kept(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let p = scores.len();
    if k < 2 || k > p {
        return Err(Error::Contract(format!("select_kept needs 2 <= k <= {p}, got k = {k}")));
    }
    let mut rest: Vec<usize> = (1..p).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k - 1 < rest.len() {
        rest.select_nth_unstable_by(k - 2, by_score);
        rest.truncate(k - 1);
    }
    rest.sort_unstable();
    let mut kept = Vec::with_capacity(k);
    kept.push(0);
    kept.extend(rest);
    Ok(kept)
}

/// Outgoing length for an incoming length (class token included):
/// `1 + max(1, round(keep · (incoming − 1)))`.
pub fn layer_keep_count(incoming: usize, keep: f64) -> usize {
    debug_assert!(incoming >= 2);
    let patches = (keep * (incoming - 1) as f64).round() as usize;
    1 + patches.max(1)
}

/// Number of patches kept by random input dropping, `⌈(1 − rate)·p₀⌉`.
pub fn random_keep_count(num_patches: usize, rate: f64) -> usize {
    // Guard against products such as 0.7 * 10 = 7.000000000000001.
    let exact = (1.0 - rate) * num_patches as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(num_patches)
}

/// Uniformly chosen kept positions for one example, as sequence positions:
/// `0` is the class token, patch `j` sits at `j + 1`.
pub fn random_input_drop<R: Rng + ?Sized>(num_patches: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    let k = random_keep_count(num_patches, rate);
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, num_patches, k)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    picked.sort_unstable();
    let mut kept = Vec::with_capacity(k + 1);
    kept.push(0);
    kept.extend(picked);
    kept
}

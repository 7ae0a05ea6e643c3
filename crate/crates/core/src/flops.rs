//! Analytical per-block FLOPs, exact in integer arithmetic.
//!
//! A block that receives `p` tokens of width `d` costs
//! `4pd² + 2p²d + pd` in self-attention and `8pd² + pd` in the MLP.
//! Patch embedding and the classifier head are not counted.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{DropPolicy, DropSchedule};
use crate::vit::ModelConfig;

pub fn msa_flops(p: u64, d: u64) -> u64 {
    4 * p * d * d + 2 * p * p * d + p * d
}

pub fn mlp_flops(p: u64, d: u64) -> u64 {
    8 * p * d * d + p * d
}

/// Block FLOPs of `batch` examples given the length entering each block.
pub fn blocks_flops(d: usize, seq_lens: &[usize], batch: usize) -> u64 {
    let per_example: u64 = seq_lens
        .iter()
        .map(|&p| msa_flops(p as u64, d as u64) + mlp_flops(p as u64, d as u64))
        .sum();
    batch as u64 * per_example
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerFlops {
    /// Tokens entering the block, class token included.
    pub seq_len: usize,
    pub msa: u64,
    pub mlp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub policy: String,
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    pub baseline: u64,
}

impl FlopsReport {
    pub fn savings(&self) -> f64 {
        1.0 - self.total as f64 / self.baseline as f64
    }

    /// Tokens reaching the last block as a fraction of the input patches.
    pub fn final_patch_fraction(&self) -> f64 {
        let first = self.layers[0].seq_len;
        let last = self.layers[self.layers.len() - 1].seq_len;
        (last - 1) as f64 / (first - 1) as f64
    }
}

fn layers(d: u64, lengths: &[usize]) -> Vec<LayerFlops> {
    lengths
        .iter()
        .map(|&p| LayerFlops {
            seq_len: p,
            msa: msa_flops(p as u64, d),
            mlp: mlp_flops(p as u64, d),
        })
        .collect()
}

fn total(layers: &[LayerFlops]) -> u64 {
    layers.iter().map(|l| l.msa + l.mlp).sum()
}

/// Forward block FLOPs of one example under `policy` (train mode).
pub fn model_flops(config: &ModelConfig, policy: &DropPolicy) -> Result<FlopsReport> {
    config.validate()?;
    policy.validate()?;
    let d = config.dim as u64;
    let full = vec![config.seq_len(); config.depth];
    let schedule = DropSchedule::new(config.num_patches(), config.depth, policy);
    let layers = layers(d, &schedule.incoming_lengths());
    Ok(FlopsReport {
        policy: policy.name().to_string(),
        total: total(&layers),
        baseline: total(&self::layers(d, &full)),
        layers,
    })
}

/// Finds the drop policy of `kind` ("agat" or "random") whose savings are
/// closest to `target`. Savings are a step function of the knob, so the
/// result may miss the target by up to half a step.
pub fn calibrate(config: &ModelConfig, kind: &str, target: f64) -> Result<(DropPolicy, f64)> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Config(format!("target reduction {target} outside [0, 1)")));
    }
    let make: fn(f64) -> DropPolicy = match kind {
        "agat" => |t| DropPolicy::AttentionGuided { keep: 1.0 - t },
        "random" => |t| DropPolicy::RandomInput { rate: t },
        other => return Err(Error::Config(format!("cannot calibrate policy `{other}`"))),
    };
    if target == 0.0 {
        return Ok((DropPolicy::None, 0.0));
    }
    let savings = |t: f64| model_flops(config, &make(t)).map(|r| r.savings());
    // Savings never decrease in the drop knob `t`; find the smallest `t`
    // reaching the target, then compare it with its left neighbour.
    let (mut lo, mut hi) = (0.0_f64, 1.0 - 1e-9);
    if savings(hi)? < target {
        let s = savings(hi)?;
        return Ok((make(hi), s));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if savings(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (s_hi, s_lo) = (savings(hi)?, savings(lo)?);
    // Land in the middle of the chosen plateau so rounding in the schedule
    // is not sensitive to the last bits of the knob.
    let pick = if (s_hi - target).abs() <= (target - s_lo).abs() {
        hi
    } else {
        lo
    };
    let s = savings(pick)?;
    let mut end = pick;
    let mut step = 1e-3;
    while end + step < 1.0 && savings(end + step)? == s {
        end += step;
        step *= 2.0;
    }
    let mut start = pick;
    step = 1e-3;
    while start - step > 0.0 && savings(start - step)? == s {
        start -= step;
        step *= 2.0;
    }
    let knob = (0.5 * (start + end) * 1e6).round() / 1e6;
    let knob = if savings(knob)? == s { knob } else { pick };
    Ok((make(knob), s))
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "policy {}", self.policy)?;
        writeln!(f, "{:>5} {:>7} {:>16} {:>16}", "block", "tokens", "msa", "mlp")?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(f, "{:>5} {:>7} {:>16} {:>16}", i + 1, l.seq_len, l.msa, l.mlp)?;
        }
        writeln!(f, "total    {} ({:.3} G)", self.total, self.total as f64 / 1e9)?;
        writeln!(f, "baseline {} ({:.3} G)", self.baseline, self.baseline as f64 / 1e9)?;
        write!(f, "savings  {:.4}", self.savings())
    }
}

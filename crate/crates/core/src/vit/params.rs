use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `[d, 3d]`, columns ordered query | key | value, heads contiguous within each.
    pub w_qkv: Tensor,
    /// `[heads, seq, seq]` when the config enables it.
    pub attn_bias: Option<Tensor>,
    pub w_proj: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc1: Tensor,
    pub w_fc2: Tensor,
}

/// Every learnable weight of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub patch_embed: Tensor,
    pub pos_embed: Tensor,
    pub class_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head: Tensor,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[rows, cols], data).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Params {
    /// Seeded initialization: fan-in uniform for projections, N(0, 0.02) for
    /// the class token and position table, identity LayerNorms, zero bias.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let seq = config.seq_len();
        let patch_embed = uniform_fan_in(&mut rng, config.patch_dim(), d);
        let pos_embed = normal(&mut rng, &[seq, d], 0.02);
        let class_token = normal(&mut rng, &[d], 0.02);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                w_qkv: uniform_fan_in(&mut rng, d, 3 * d),
                attn_bias: config.use_attn_bias.then(|| Tensor::zeros(&[config.heads, seq, seq])),
                w_proj: uniform_fan_in(&mut rng, d, d),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                w_fc1: uniform_fan_in(&mut rng, d, config.mlp_hidden()),
                w_fc2: uniform_fan_in(&mut rng, config.mlp_hidden(), d),
            })
            .collect();
        Params {
            patch_embed,
            pos_embed,
            class_token,
            blocks,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            head: uniform_fan_in(&mut rng, d, config.num_classes),
        }
    }

    /// All tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("pos_embed".to_string(), &self.pos_embed),
            ("class_token".to_string(), &self.class_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("blocks.{i}.ln1.beta"), &b.ln1_beta));
            out.push((format!("blocks.{i}.attn.qkv"), &b.w_qkv));
            if let Some(bias) = &b.attn_bias {
                out.push((format!("blocks.{i}.attn.bias"), bias));
            }
            out.push((format!("blocks.{i}.attn.proj"), &b.w_proj));
            out.push((format!("blocks.{i}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("blocks.{i}.ln2.beta"), &b.ln2_beta));
            out.push((format!("blocks.{i}.mlp.fc1"), &b.w_fc1));
            out.push((format!("blocks.{i}.mlp.fc2"), &b.w_fc2));
        }
        out.push(("norm.gamma".to_string(), &self.norm_gamma));
        out.push(("norm.beta".to_string(), &self.norm_beta));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable tensors in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_embed, &mut self.pos_embed, &mut self.class_token];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.push(&mut b.w_qkv);
            if let Some(bias) = &mut b.attn_bias {
                out.push(bias);
            }
            out.push(&mut b.w_proj);
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.w_fc1);
            out.push(&mut b.w_fc2);
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out.push(&mut self.head);
        out
    }

    /// Expected `(name, shape)` table for a config.
    pub fn shape_table(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let zero = Params::zeros(config);
        zero.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut p = Params::init(config, 0);
        p.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        p
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Option<Self> {
        let mut p = Params::zeros(config);
        let slots = p.tensors_mut();
        if slots.len() != tensors.len() {
            return None;
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return None;
            }
            *slot = t;
        }
        Some(p)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_qkv: Var,
    pub attn_bias: Option<Var>,
    pub w_proj: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_fc1: Var,
    pub w_fc2: Var,
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub patch_embed: Var,
    pub pos_embed: Var,
    pub class_token: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub head: Var,
}

impl ParamVars {
    /// Registers every weight as a grad leaf (`trainable`) or a constant.
    pub fn bind(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let patch_embed = put(&params.patch_embed);
        let pos_embed = put(&params.pos_embed);
        let class_token = put(&params.class_token);
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_gamma: put(&b.ln1_gamma),
                ln1_beta: put(&b.ln1_beta),
                w_qkv: put(&b.w_qkv),
                attn_bias: b.attn_bias.as_ref().map(&mut put),
                w_proj: put(&b.w_proj),
                ln2_gamma: put(&b.ln2_gamma),
                ln2_beta: put(&b.ln2_beta),
                w_fc1: put(&b.w_fc1),
                w_fc2: put(&b.w_fc2),
            })
            .collect();
        ParamVars {
            patch_embed,
            pos_embed,
            class_token,
            blocks,
            norm_gamma: put(&params.norm_gamma),
            norm_beta: put(&params.norm_beta),
            head: put(&params.head),
        }
    }

    /// Vars in the same order as [`Params::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.patch_embed, self.pos_embed, self.class_token];
        for b in &self.blocks {
            out.extend([b.ln1_gamma, b.ln1_beta, b.w_qkv]);
            out.extend(b.attn_bias);
            out.extend([b.w_proj, b.ln2_gamma, b.ln2_beta, b.w_fc1, b.w_fc2]);
        }
        out.extend([self.norm_gamma, self.norm_beta, self.head]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_finite() {
        let c = ModelConfig::tiny();
        let a = Params::init(&c, 7);
        assert_eq!(a, Params::init(&c, 7));
        assert_ne!(a, Params::init(&c, 8));
        assert!(a.named().iter().all(|(_, t)| t.is_finite()));
        let bound = 1.0 / (c.dim as f64).sqrt();
        assert!(a.blocks[0].w_qkv.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn named_and_vars_align() {
        let mut c = ModelConfig::tiny();
        c.use_attn_bias = true;
        let p = Params::init(&c, 1);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &p, true);
        let named = p.named();
        let ordered = vars.ordered();
        assert_eq!(named.len(), ordered.len());
        for ((_, t), v) in named.iter().zip(&ordered) {
            assert_eq!(*t, tape.value(*v));
        }
        assert!(named.iter().any(|(n, _)| n == "blocks.1.attn.bias"));
        let rebuilt = Params::from_tensors(&c, named.iter().map(|(_, t)| (*t).clone()).collect());
        assert_eq!(rebuilt.as_ref(), Some(&p));
    }
}

//! Finite-difference verification of every tape operation and of the
//! end-to-end ViT gradients.
//!
//! Each check builds `loss = Σ out ∘ R` for a random constant `R`, then
//! compares the tape gradient `a` of every input with central differences
//! `n` (step `h`). The error of one input is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`
//! (zero when both vanish); a check reports the worst value over all
//! inputs and seeds.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var, LAYER_NORM_EPS};
use crate::data::uniform_images;
use crate::error::Result;
use crate::policy::DropPolicy;
use crate::tensor::Tensor;
use crate::vit::{forward, ForwardOptions, ModelConfig, ParamVars, Params};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub step: f64,
    pub threshold: f64,
    /// Corrupt this op's backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: 100,
            step: 1e-5,
            threshold: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub cases: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.threshold)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.max_rel_error < self.threshold { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<18} {:>10.3e} {:>5} cases  {verdict}",
                c.name, c.max_rel_error, c.cases
            )?;
        }
        write!(
            f,
            "{} (threshold {:e})",
            if self.passed() {
                "all checks passed"
            } else {
                "gradient check FAILED"
            },
            self.threshold
        )
    }
}

/// The names the suite reports, in order: one per op, then the model checks.
pub fn check_names() -> Vec<String> {
    OpKind::OPS
        .iter()
        .map(|k| k.name().to_string())
        .chain(MODEL_CHECKS.iter().map(|s| s.to_string()))
        .collect()
}

const MODEL_CHECKS: [&str; 3] = ["vit_input", "vit_params", "vit_agat_input"];

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in `[−2, 2]` at least `gap` away from each of `avoid`.
fn random_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], avoid: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn index_lists(rng: &mut ChaCha8Rng, lists: usize, k: usize, len: usize) -> Vec<Vec<usize>> {
    (0..lists)
        .map(|_| (0..k).map(|_| rng.random_range(0..len)).collect())
        .collect()
}

/// Random inputs and graph for one op.
fn case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    let batch = dim(rng);
    match kind {
        OpKind::MatMul => {
            let lead = if rng.random() { vec![batch, a, b] } else { vec![a, b] };
            (
                vec![random(rng, &lead, -1.0, 1.0), random(rng, &[b, c], -1.0, 1.0)],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        OpKind::BatchMatMul => (
            vec![
                random(rng, &[batch, a, b], -1.0, 1.0),
                random(rng, &[batch, b, c], -1.0, 1.0),
            ],
            Box::new(|t, v| t.batch_matmul(v[0], v[1], false)),
        ),
        OpKind::BatchMatMulNt => (
            vec![
                random(rng, &[batch, a, b], -1.0, 1.0),
                random(rng, &[batch, c, b], -1.0, 1.0),
            ],
            Box::new(|t, v| t.batch_matmul(v[0], v[1], true)),
        ),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let shape = [a, b, c];
            let inputs = vec![random(rng, &shape, -1.0, 1.0), random(rng, &shape, -1.0, 1.0)];
            let build: Build = match kind {
                OpKind::Add => Box::new(|t, v| t.add(v[0], v[1])),
                OpKind::Sub => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (inputs, build)
        }
        OpKind::Scale => {
            let s: f64 = rng.random_range(-3.0..3.0);
            (
                vec![random(rng, &[a, b], -1.0, 1.0)],
                Box::new(move |t, v| Ok(t.scale(v[0], s))),
            )
        }
        OpKind::Softmax => (
            vec![random(rng, &[a, b + 1], -3.0, 3.0)],
            Box::new(|t, v| t.softmax_lastdim(v[0])),
        ),
        // A width-2 row always normalizes to ±1, so its input gradient
        // vanishes and a relative error is meaningless there.
        OpKind::LayerNorm => (
            vec![
                random(rng, &[a, b + 2], -2.0, 2.0),
                random(rng, &[b + 2], 0.5, 1.5),
                random(rng, &[b + 2], -0.5, 0.5),
            ],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ),
        OpKind::Gelu => (
            vec![random(rng, &[a, b, c], -4.0, 4.0)],
            Box::new(|t, v| Ok(t.gelu(v[0]))),
        ),
        OpKind::GatherRows => {
            let idx = index_lists(rng, batch, c + 1, a);
            (
                vec![random(rng, &[batch, a, b], -1.0, 1.0)],
                Box::new(move |t, v| t.gather_rows(v[0], &idx)),
            )
        }
        OpKind::ConcatRows => (
            vec![
                random(rng, &[batch, a, c], -1.0, 1.0),
                random(rng, &[batch, b, c], -1.0, 1.0),
            ],
            Box::new(|t, v| t.concat_rows(v[0], v[1])),
        ),
        OpKind::BroadcastBatch => (
            vec![random(rng, &[a, b], -1.0, 1.0)],
            Box::new(move |t, v| Ok(t.broadcast_batch(v[0], batch))),
        ),
        OpKind::SplitHeads => (
            vec![random(rng, &[batch, a, b * c], -1.0, 1.0)],
            Box::new(move |t, v| t.split_heads(v[0], c)),
        ),
        OpKind::MergeHeads => (
            vec![random(rng, &[batch * c, a, b], -1.0, 1.0)],
            Box::new(move |t, v| t.merge_heads(v[0], c)),
        ),
        OpKind::SliceLast => {
            let full = b + c;
            let start = rng.random_range(0..full);
            let len = rng.random_range(1..=full - start);
            (
                vec![random(rng, &[a, full], -1.0, 1.0)],
                Box::new(move |t, v| t.slice_last(v[0], start, len)),
            )
        }
        OpKind::Reshape => (
            vec![random(rng, &[a, b, c], -1.0, 1.0)],
            Box::new(move |t, v| t.reshape(v[0], &[c, a * b])),
        ),
        OpKind::Patchify => {
            let patch = a.min(2);
            let side = patch * b;
            (
                vec![random(rng, &[batch, c, side, side], -1.0, 1.0)],
                Box::new(move |t, v| t.patchify(v[0], patch)),
            )
        }
        OpKind::GatherPairs => {
            let size = a + 1;
            let idx = index_lists(rng, batch, b, size);
            (
                vec![random(rng, &[c, size, size], -1.0, 1.0)],
                Box::new(move |t, v| t.gather_pairs(v[0], &idx)),
            )
        }
        OpKind::CrossEntropy => {
            let labels: Vec<usize> = (0..a).map(|_| rng.random_range(0..=b)).collect();
            (
                vec![random(rng, &[a, b + 1], -3.0, 3.0)],
                Box::new(move |t, v| t.cross_entropy_logits(v[0], &labels)),
            )
        }
        OpKind::Sum => (vec![random(rng, &[a, b], -1.0, 1.0)], Box::new(|t, v| Ok(t.sum(v[0])))),
        OpKind::Mean => (vec![random(rng, &[a, b], -1.0, 1.0)], Box::new(|t, v| Ok(t.mean(v[0])))),
        OpKind::Sign => (
            vec![random_avoiding(rng, &[a, b], &[0.0], 0.05)],
            Box::new(|t, v| Ok(t.sign(v[0]))),
        ),
        OpKind::Clamp => (
            vec![random_avoiding(rng, &[a, b], &[-0.5, 0.5], 0.05)],
            Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        ),
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

/// Worst relative error over the inputs of one graph.
fn check_graph(inputs: &[Tensor], build: &Build, weights_seed: u64, opts: &GradcheckOptions) -> Result<f64> {
    let weights = std::cell::OnceCell::new();
    let loss_of = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let shape = tape.shape(out).to_vec();
        let w = weights.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
            random(&mut rng, &shape, -1.0, 1.0)
        });
        let w = tape.constant(w.clone());
        let weighted = tape.mul(out, w)?;
        Ok(tape.sum(weighted))
    };
    let value = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = loss_of(&mut tape, &vars)?;
        Ok(tape.value(loss).item().expect("scalar"))
    };

    let mut tape = opts.fault.map_or_else(Tape::new, Tape::with_fault);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = loss_of(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;

    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).expect("leaf gradient");
        let mut numeric = Vec::with_capacity(analytic.numel());
        for j in 0..probe[i].numel() {
            let x0 = probe[i].data()[j];
            probe[i].data_mut()[j] = x0 + opts.step;
            let up = value(&probe)?;
            probe[i].data_mut()[j] = x0 - opts.step;
            let down = value(&probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * opts.step));
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        use_attn_bias: true,
        ..ModelConfig::tiny()
    }
}

/// Perturbs parameters so that LayerNorm and bias tables are not at their
/// symmetric initial values.
fn perturbed_params(config: &ModelConfig, seed: u64) -> Params {
    let mut params = Params::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    params
}

/// Loss of a forward pass, plus the kept positions so a caller can spot
/// selection changes.
fn model_loss(
    config: &ModelConfig,
    params: &Params,
    images: &Tensor,
    labels: &[usize],
    opts: &ForwardOptions,
    rng_seed: u64,
) -> Result<(f64, Vec<Vec<Vec<usize>>>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, false);
    let x = tape.constant(images.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (logits, trace) = forward(&mut tape, config, &vars, x, opts, &mut rng as &mut dyn RngCore)?;
    let loss = tape.cross_entropy_logits(logits, labels)?;
    let kept = trace.blocks.into_iter().map(|b| b.kept).collect();
    Ok((tape.value(loss).item().expect("scalar"), kept))
}

/// Input-gradient check. Coordinates whose perturbation changes the kept
/// sets sit on a selection boundary, where the loss is not differentiable,
/// and are skipped.
fn check_vit_input(seed: u64, opts: &GradcheckOptions, train: Option<DropPolicy>) -> Result<f64> {
    let config = gradcheck_config();
    let params = perturbed_params(&config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = config.image_shape();
    let images = uniform_images(&[2, c, h, w], &mut rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..config.num_classes)).collect();
    let fwd = train.map_or_else(ForwardOptions::eval, ForwardOptions::train);
    let rng_seed = seed.wrapping_add(1);

    let mut tape = opts.fault.map_or_else(Tape::new, Tape::with_fault);
    let vars = ParamVars::bind(&mut tape, &params, false);
    let x = tape.leaf(images.clone());
    let mut frng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (logits, trace) = forward(&mut tape, &config, &vars, x, &fwd, &mut frng as &mut dyn RngCore)?;
    let base_kept: Vec<Vec<Vec<usize>>> = trace.blocks.into_iter().map(|b| b.kept).collect();
    let loss = tape.cross_entropy_logits(logits, &labels)?;
    let analytic = tape.backward(loss)?.take(x).expect("input leaf");

    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut probe = images.clone();
    for j in 0..probe.numel() {
        let x0 = probe.data()[j];
        probe.data_mut()[j] = x0 + opts.step;
        let (up, kept_up) = model_loss(&config, &params, &probe, &labels, &fwd, rng_seed)?;
        probe.data_mut()[j] = x0 - opts.step;
        let (down, kept_down) = model_loss(&config, &params, &probe, &labels, &fwd, rng_seed)?;
        probe.data_mut()[j] = x0;
        if kept_up != base_kept || kept_down != base_kept {
            continue;
        }
        a.push(analytic.data()[j]);
        n.push((up - down) / (2.0 * opts.step));
    }
    Ok(rel_error(&a, &n))
}

/// Directional derivative of the loss along a random parameter direction.
fn check_vit_params(seed: u64, opts: &GradcheckOptions) -> Result<f64> {
    let config = gradcheck_config();
    let params = perturbed_params(&config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = config.image_shape();
    let images = uniform_images(&[2, c, h, w], &mut rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..config.num_classes)).collect();
    let fwd = ForwardOptions::eval();

    let mut tape = opts.fault.map_or_else(Tape::new, Tape::with_fault);
    let vars = ParamVars::bind(&mut tape, &params, true);
    let x = tape.constant(images.clone());
    let (logits, _) = forward(&mut tape, &config, &vars, x, &fwd, &mut rng as &mut dyn RngCore)?;
    let loss = tape.cross_entropy_logits(logits, &labels)?;
    let mut grads = tape.backward(loss)?;

    let direction: Vec<Tensor> = params
        .named()
        .iter()
        .map(|(_, t)| random(&mut rng, t.shape(), -1.0, 1.0))
        .collect();
    let analytic: f64 = vars
        .ordered()
        .iter()
        .zip(&direction)
        .map(|(v, d)| {
            let g = grads.take(*v).expect("param leaf");
            g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    let shifted = |sign: f64| -> Result<f64> {
        let mut p = params.clone();
        for (t, d) in p.tensors_mut().into_iter().zip(&direction) {
            t.data_mut()
                .iter_mut()
                .zip(d.data())
                .for_each(|(v, dv)| *v += sign * opts.step * dv);
        }
        Ok(model_loss(&config, &p, &images, &labels, &fwd, 0)?.0)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * opts.step);
    Ok(rel_error(&[analytic], &[numeric]))
}

/// Runs every check for `opts.seeds` seeds.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for kind in OpKind::OPS {
        let mut worst = 0.0_f64;
        for seed in 0..opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (inputs, build) = case(kind, &mut rng);
            worst = worst.max(check_graph(&inputs, &build, seed ^ 0xabcd, opts)?);
        }
        checks.push(CheckResult {
            name: kind.name().to_string(),
            max_rel_error: worst,
            cases: opts.seeds as usize,
        });
    }
    for name in MODEL_CHECKS {
        let mut worst = 0.0_f64;
        for seed in 0..opts.seeds {
            let e = match name {
                "vit_input" => check_vit_input(seed, opts, None)?,
                "vit_params" => check_vit_params(seed, opts)?,
                _ => check_vit_input(seed, opts, Some(DropPolicy::AttentionGuided { keep: 0.6 }))?,
            };
            worst = worst.max(e);
        }
        checks.push(CheckResult {
            name: name.to_string(),
            max_rel_error: worst,
            cases: opts.seeds as usize,
        });
    }
    Ok(GradcheckReport {
        threshold: opts.threshold,
        checks,
    })
}

//! Fast adversarial training: FGSM-with-random-start inner step, AdamW,
//! warmup plus cosine learning rate, PGD evaluation.

mod checkpoint;
mod metrics;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm_random_init, pgd, AttackConfig, VitObjective};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::flops::blocks_flops;
use crate::policy::DropPolicy;
use crate::tensor::Tensor;
use crate::vit::{argmax_rows, ForwardOptions, Model, ModelConfig, Params};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{plot_records, MetricsRow, MetricsWriter, METRICS_HEADER};

/// Stream of the training rng; batch order uses `epoch + 1`.
const TRAIN_STREAM: u64 = u64::MAX;
const EVAL_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub attack: AttackConfig,
    pub policy: DropPolicy,
    pub eval_attack: AttackConfig,
    /// Evaluate every this many epochs (the last epoch always evaluates); 0
    /// evaluates only at the end.
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 3,
            base_lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 128,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            attack: AttackConfig::fast_at(0.1),
            policy: DropPolicy::None,
            eval_attack: AttackConfig::pgd(0.1, 10),
            eval_every: 5,
            eval_batch_size: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("base_lr and weight_decay must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("need 0 <= beta1, beta2 < 1 and adam_eps > 0".into());
        }
        if self.attack.steps != 1 {
            return bad(format!(
                "training attack is single-step, got steps = {}",
                self.attack.steps
            ));
        }
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.policy.validate()
    }

    fn is_eval_epoch(&self, epoch: usize) -> bool {
        epoch == self.epochs || (self.eval_every > 0 && epoch.is_multiple_of(self.eval_every))
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero, over run progress
/// `fraction ∈ [0, 1]`.
pub fn lr_at(fraction: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64 / cfg.epochs as f64;
    if fraction < warm {
        return cfg.base_lr * fraction / warm;
    }
    let progress = ((fraction - warm) / (1.0 - warm)).clamp(0.0, 1.0);
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(cfg: &TrainConfig) -> Self {
        AdamW {
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Params,
    /// First and second moments, in [`Params::named`] order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let params = Params::init(config, seed);
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        TrainState {
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            epoch: 0,
            rng,
        }
    }
}

/// One AdamW update: decoupled decay `θ ← θ − lr·wd·θ`, then the
/// bias-corrected Adam step.
pub fn adamw_step(state: &mut TrainState, grads: &[Tensor], lr: f64, opt: &AdamW) -> Result<()> {
    let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            names.len()
        )));
    }
    for (name, g) in names.iter().zip(grads) {
        if !g.is_finite() {
            return Err(Error::Training {
                param: name.clone(),
                msg: "non-finite gradient".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let params = state.params.tensors_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if g.shape() != p.shape() {
            return Err(Error::dim("adamw", g.shape(), p.shape()));
        }
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * opt.weight_decay * p[i];
            p[i] -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Aggregates of one training epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Block FLOPs of every forward pass run (attack and update).
    pub forward_flops: u64,
}

fn total_steps(n: usize, cfg: &TrainConfig) -> u64 {
    (n.div_ceil(cfg.batch_size) * cfg.epochs) as u64
}

/// One pass over `data`: FGSM example generation and an AdamW step per
/// batch, both with train-mode forwards under `cfg.policy`.
pub fn train_epoch(
    state: &mut TrainState,
    config: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let total = total_steps(data.len(), cfg);
    let opt = AdamW::from(cfg);
    let opts = ForwardOptions::train(cfg.policy);
    let mut loss_sum = 0.0;
    let mut flops = 0;
    let mut lr = 0.0;
    for indices in batches(data.len(), cfg.batch_size, cfg.seed, state.epoch) {
        let (x, y) = data.batch(&indices);
        let model = Model::new(config, &state.params);
        let objective = VitObjective::new(model, opts.clone());
        let x_adv = fgsm_random_init(&objective, &x, &y, &cfg.attack, &mut state.rng)?;
        let (loss, grads, trace) = model.param_gradients(&x_adv, &y, &opts, &mut state.rng)?;
        flops += objective.forward_flops() + blocks_flops(config.dim, &trace.seq_lens(), y.len());
        loss_sum += loss * y.len() as f64;
        lr = lr_at((state.step as f64 + 0.5) / total as f64, cfg);
        adamw_step(state, &grads, lr, &opt)?;
    }
    state.epoch += 1;
    Ok(EpochStats {
        train_loss: loss_sum / data.len() as f64,
        lr,
        forward_flops: flops,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub mean_adv_loss: f64,
}

/// Clean and robust accuracy with eval-mode forwards. An example counts as
/// robust only if it is classified correctly both before and after the
/// attack.
pub fn evaluate(
    config: &ModelConfig,
    params: &Params,
    data: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let model = Model::new(config, params);
    let objective = VitObjective::new(model, ForwardOptions::eval());
    let (mut clean, mut robust, mut loss_sum) = (0usize, 0usize, 0.0);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let clean_pred = model.forward(&x, &ForwardOptions::eval(), &mut rng)?.predictions();
        let adv = if attack.epsilon == 0.0 {
            x.clone()
        } else {
            pgd(&objective, &x, &y, attack, &mut rng)?
        };
        let mut tape = crate::autodiff::Tape::new();
        let vars = crate::vit::ParamVars::bind(&mut tape, params, false);
        let xa = tape.constant(adv);
        let (logits, _) = crate::vit::forward(&mut tape, config, &vars, xa, &ForwardOptions::eval(), &mut rng)?;
        let adv_loss = tape.cross_entropy_logits(logits, &y)?;
        loss_sum += tape.value(adv_loss).item().expect("scalar") * y.len() as f64;
        let adv_pred = argmax_rows(tape.value(logits));
        for i in 0..y.len() {
            let ok = clean_pred[i] == y[i];
            clean += ok as usize;
            robust += (ok && adv_pred[i] == y[i]) as usize;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        clean_acc: clean as f64 / n,
        robust_acc: robust as f64 / n,
        mean_adv_loss: loss_sum / n,
    })
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each one.
/// Wall-clock time is reported only when `wall_clock` is set, so that
/// metrics can be compared byte for byte across runs.
pub fn fit(
    state: &mut TrainState,
    config: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    wall_clock: bool,
    mut on_epoch: impl FnMut(&MetricsRow, &TrainState) -> Result<()>,
) -> Result<Option<EvalResult>> {
    config.validate()?;
    cfg.validate()?;
    let mut last = None;
    while (state.epoch as usize) < cfg.epochs {
        let started = Instant::now();
        let stats = train_epoch(state, config, train, cfg)?;
        let seconds = if wall_clock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let epoch = state.epoch as usize;
        let eval = if cfg.is_eval_epoch(epoch) {
            let r = evaluate(
                config,
                &state.params,
                test,
                &cfg.eval_attack,
                cfg.eval_batch_size,
                cfg.seed,
            )?;
            last = Some(r);
            Some(r)
        } else {
            None
        };
        let row = MetricsRow {
            epoch,
            lr: stats.lr,
            train_loss: stats.train_loss,
            clean_acc: eval.map(|r| r.clean_acc),
            robust_acc: eval.map(|r| r.robust_acc),
            epoch_wall_seconds: seconds,
            train_forward_flops: stats.forward_flops,
        };
        on_epoch(&row, state)?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0.0, &cfg), 0.0);
        assert!((lr_at(0.2, &cfg) - cfg.base_lr).abs() < 1e-15);
        assert!((lr_at(0.1, &cfg) - 0.5 * cfg.base_lr).abs() < 1e-15);
        assert!(lr_at(1.0, &cfg).abs() < 1e-18);
        assert!((lr_at(0.6, &cfg) - 0.5 * cfg.base_lr).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let config = ModelConfig::tiny();
        let mut state = TrainState::new(&config, 3);
        let before = state.params.clone();
        let grads: Vec<Tensor> = before
            .named()
            .iter()
            .map(|(_, t)| t.map(|v| if v >= 0.0 { 0.5 } else { -2.0 }))
            .collect();
        let opt = AdamW {
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adamw_step(&mut state, &grads, 0.01, &opt).unwrap();
        // After bias correction m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        for ((_, b), (_, a)) in before.named().iter().zip(state.params.named()) {
            for (x0, x1) in b.data().iter().zip(a.data()) {
                let g: f64 = if *x0 >= 0.0 { 0.5 } else { -2.0 };
                let expected = x0 - 0.01 * g / (g.abs() + 1e-8);
                assert!((x1 - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decay_only_and_idle_steps() {
        let config = ModelConfig::tiny();
        let mut state = TrainState::new(&config, 0);
        let before = state.params.clone();
        let zeros: Vec<Tensor> = before.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut opt = AdamW {
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adamw_step(&mut state, &zeros, 0.1, &opt).unwrap();
        assert_eq!(state.params, before);
        opt.weight_decay = 0.5;
        adamw_step(&mut state, &zeros, 0.1, &opt).unwrap();
        for ((_, b), (_, a)) in before.named().iter().zip(state.params.named()) {
            for (x0, x1) in b.data().iter().zip(a.data()) {
                assert_eq!(*x1, x0 - 0.1 * 0.5 * x0);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let config = ModelConfig::tiny();
        let mut state = TrainState::new(&config, 0);
        let mut grads: Vec<Tensor> = state
            .params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        grads[2].data_mut()[0] = f64::NAN;
        let opt = AdamW::from(&TrainConfig::default());
        match adamw_step(&mut state, &grads, 0.1, &opt) {
            Err(Error::Training { param, .. }) => assert_eq!(param, "class_token"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

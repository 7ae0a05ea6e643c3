//! L∞ adversarial attacks: FGSM with random start and PGD.

use std::cell::Cell;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flops::blocks_flops;
use crate::tensor::Tensor;
use crate::vit::{ForwardOptions, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_init: bool,
    #[serde(default)]
    pub pixel_min: f64,
    #[serde(default = "one")]
    pub pixel_max: f64,
}

fn one() -> f64 {
    1.0
}

impl AttackConfig {
    /// Single FGSM step from a uniform random start, α = 1.25ε.
    pub fn fast_at(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            alpha: 1.25 * epsilon,
            steps: 1,
            random_init: true,
            pixel_min: 0.0,
            pixel_max: 1.0,
        }
    }

    /// `steps`-step PGD with random start and α = 2ε/steps.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            alpha: 2.0 * epsilon / steps.max(1) as f64,
            steps,
            random_init: true,
            pixel_min: 0.0,
            pixel_max: 1.0,
        }
    }

    pub fn without_init(self) -> Self {
        AttackConfig {
            random_init: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("attack alpha must be finite and >= 0, got {}", self.alpha));
        }
        // With ε = 0 every step is projected away, so a zero step is harmless.
        if self.steps >= 1 && self.epsilon > 0.0 && self.alpha == 0.0 {
            return bad("attack alpha must be > 0 when steps >= 1".into());
        }
        if !(self.pixel_min < self.pixel_max) {
            return bad(format!("pixel range [{}, {}] is empty", self.pixel_min, self.pixel_max));
        }
        Ok(())
    }
}

/// Something whose mean cross-entropy can be differentiated with respect to
/// its input batch.
pub trait InputGradient {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize], rng: &mut dyn RngCore) -> Result<(f64, Tensor)>;
}

/// Adapter for attacking a ViT. Counts the block FLOPs of every forward pass
/// it runs, per the per-block complexity model.
pub struct VitObjective<'a> {
    pub model: Model<'a>,
    pub opts: ForwardOptions,
    flops: Cell<u64>,
}

impl<'a> VitObjective<'a> {
    pub fn new(model: Model<'a>, opts: ForwardOptions) -> Self {
        VitObjective {
            model,
            opts,
            flops: Cell::new(0),
        }
    }

    pub fn forward_flops(&self) -> u64 {
        self.flops.get()
    }
}

impl InputGradient for VitObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize], rng: &mut dyn RngCore) -> Result<(f64, Tensor)> {
        let (loss, grad, trace) = self.model.input_gradient(x, labels, &self.opts, rng)?;
        let spent = blocks_flops(self.model.config.dim, &trace.seq_lens(), labels.len());
        self.flops.set(self.flops.get() + spent);
        Ok((loss, grad))
    }
}

/// Multinomial logistic regression on flattened inputs, `logits = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `[features, classes]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, logits) = self.record(&mut tape, x, false)?;
        Ok(tape.value(logits).clone())
    }

    fn record(&self, tape: &mut Tape, x: &Tensor, track: bool) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
        let features = self.weight.shape()[0];
        if !x.numel().is_multiple_of(features) {
            return Err(Error::dim("linear", x.shape(), self.weight.shape()));
        }
        let flat = x.clone().reshape(&[x.numel() / features, features])?;
        let xv = if track { tape.leaf(flat) } else { tape.constant(flat) };
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let z = tape.matmul(xv, w)?;
        let rows = tape.shape(z)[0];
        let b = tape.broadcast_batch(b, rows);
        let logits = tape.add(z, b)?;
        Ok((xv, logits))
    }
}

impl InputGradient for LinearClassifier {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize], _rng: &mut dyn RngCore) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let (xv, logits) = self.record(&mut tape, x, true)?;
        let loss = tape.cross_entropy_logits(logits, labels)?;
        let value = tape.value(loss).item().expect("scalar");
        let g = tape.backward(loss)?.take(xv).expect("input is a leaf");
        Ok((value, g.reshape(x.shape())?))
    }
}

/// Elementwise clamp of a perturbation to `[−ε, ε]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.clamp(-epsilon, epsilon)
}

fn random_start(x: &Tensor, cfg: &AttackConfig, rng: &mut dyn RngCore) -> Tensor {
    if !cfg.random_init {
        return x.clone();
    }
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            (v + cfg.epsilon * (2.0 * u - 1.0)).clamp(cfg.pixel_min, cfg.pixel_max)
        })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape as x")
}

/// One signed-gradient step from `current`, projected to the ball around `x`
/// and then to the pixel box.
fn step(x: &Tensor, current: &Tensor, grad: &Tensor, cfg: &AttackConfig) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(current.data())
        .zip(grad.data())
        .map(|((&x0, &c), &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let delta = (c - x0 + cfg.alpha * s).clamp(-cfg.epsilon, cfg.epsilon);
            (x0 + delta).clamp(cfg.pixel_min, cfg.pixel_max)
        })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape as x")
}

fn check_input(x: &Tensor, cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(Error::Contract("attack input contains non-finite values".into()));
    }
    Ok(())
}

/// FGSM from a uniform start in the ε-ball (clamped to the pixel box).
pub fn fgsm_random_init(
    model: &dyn InputGradient,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    check_input(x, cfg)?;
    if cfg.steps != 1 {
        return Err(Error::Contract(format!(
            "FGSM takes exactly one step, got {}",
            cfg.steps
        )));
    }
    let start = random_start(x, cfg, rng);
    let (_, grad) = model.loss_and_grad(&start, labels, rng)?;
    Ok(step(x, &start, &grad, cfg))
}

/// Projected gradient ascent on the loss for `cfg.steps` signed steps.
pub fn pgd(
    model: &dyn InputGradient,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    check_input(x, cfg)?;
    if cfg.steps == 0 {
        return Err(Error::Contract("PGD needs at least one step".into()));
    }
    let mut current = random_start(x, cfg, rng);
    for _ in 0..cfg.steps {
        let (_, grad) = model.loss_and_grad(&current, labels, rng)?;
        current = step(x, &current, &grad, cfg);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_class() -> LinearClassifier {
        LinearClassifier {
            weight: Tensor::from_rows(&[vec![1.0, -1.0], vec![-2.0, 0.5], vec![0.0, 0.0]]),
            bias: Tensor::new(&[2], vec![0.1, -0.1]).unwrap(),
        }
    }

    #[test]
    fn projection() {
        let d = Tensor::new(&[3], vec![0.05, -0.3, 0.2]).unwrap();
        let p = project_linf(&d, 0.1);
        assert_eq!(p.data(), &[0.05, -0.1, 0.1]);
        assert_eq!(project_linf(&p, 0.1), p);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let model = two_class();
        let x = Tensor::new(&[2, 3], vec![0.2, 0.4, 0.6, 0.9, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fast = fgsm_random_init(&model, &x, &[0, 1], &AttackConfig::fast_at(0.0), &mut rng).unwrap();
        assert_eq!(fast, x);
        let multi = pgd(&model, &x, &[0, 1], &AttackConfig::pgd(0.0, 5), &mut rng).unwrap();
        assert_eq!(multi, x);
    }

    #[test]
    fn fgsm_on_linear_model_follows_weight_difference() {
        // For two classes, ∂CE/∂x has the sign of w_other − w_label.
        let model = two_class();
        let x = Tensor::new(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap();
        let cfg = AttackConfig::fast_at(0.1).without_init();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adv = fgsm_random_init(&model, &x, &[0], &cfg, &mut rng).unwrap();
        // w1 − w0 = [−2, 2.5, 0]
        assert_eq!(adv.data(), &[0.4, 0.6, 0.5]);
    }

    #[test]
    fn steps_must_match() {
        let model = two_class();
        let x = Tensor::zeros(&[1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttackConfig::pgd(0.1, 3);
        assert!(fgsm_random_init(&model, &x, &[0], &cfg, &mut rng).is_err());
        let bad = AttackConfig {
            pixel_min: 1.0,
            ..AttackConfig::fast_at(0.1)
        };
        assert!(bad.validate().is_err());
    }
}

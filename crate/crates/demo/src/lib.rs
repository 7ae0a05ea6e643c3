//! Browser demo. Every export returns a JSON string for the page to draw.
//!
//! The page holds one [`Demo`]: a small ViT trained in a few seconds on
//! synthetic blob images, which is enough for its attention to prefer the
//! patches covering the blob.

use agat::attacks::{pgd, AttackConfig, VitObjective};
use agat::data::{synthetic_blobs, Dataset};
use agat::flops::{calibrate, model_flops};
use agat::policy::DropPolicy;
use agat::train::{train_epoch, TrainConfig, TrainState};
use agat::vit::{ForwardOptions, Model, ModelConfig, Params};
use agat::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const CLASSES: usize = 4;

pub fn demo_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 2,
        channels: 1,
        dim: 24,
        heads: 2,
        depth: 4,
        mlp_ratio: 2,
        num_classes: CLASSES,
        use_attn_bias: false,
        attn_dropout_rate: 0.0,
    }
}

#[derive(Serialize)]
pub struct FlopsView {
    pub policy: String,
    pub knob: f64,
    pub seq_lens: Vec<usize>,
    pub block_flops: Vec<u64>,
    pub total: u64,
    pub baseline: u64,
    pub savings: f64,
}

/// Per-block FLOPs of ViT-Base/16 for `kind` ("agat", "random" or "none")
/// calibrated to `target` FLOPs reduction in [0, 1).
pub fn flops_view(kind: &str, target: f64) -> agat::Result<FlopsView> {
    let config = ModelConfig::vit_base();
    let policy = match kind {
        "none" => DropPolicy::None,
        _ => calibrate(&config, kind, target)?.0,
    };
    let knob = match policy {
        DropPolicy::None => 1.0,
        DropPolicy::RandomInput { rate } => rate,
        DropPolicy::AttentionGuided { keep } => keep,
    };
    let report = model_flops(&config, &policy)?;
    Ok(FlopsView {
        policy: report.policy.clone(),
        knob,
        seq_lens: report.layers.iter().map(|l| l.seq_len).collect(),
        block_flops: report.layers.iter().map(|l| l.msa + l.mlp).collect(),
        total: report.total,
        baseline: report.baseline,
        savings: report.savings(),
    })
}

#[derive(Serialize)]
pub struct KeptView {
    pub label: usize,
    pub prediction: usize,
    pub image: Vec<f64>,
    /// Patches entering each block, as patch indices (class token omitted).
    pub layers: Vec<Vec<usize>>,
}

#[derive(Serialize)]
pub struct AttackView {
    pub label: usize,
    pub clean: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub clean_probs: Vec<f64>,
    pub adversarial_probs: Vec<f64>,
    pub linf: f64,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[wasm_bindgen]
pub struct Demo {
    config: ModelConfig,
    params: Params,
    images: Dataset,
}

impl Demo {
    /// Trains the demo model for `epochs` short epochs (clean inputs).
    pub fn train(seed: u64, epochs: usize) -> agat::Result<Demo> {
        let config = demo_model();
        let train = synthetic_blobs(192, CLASSES, config.image_size, 0.1, seed)?;
        let cfg = TrainConfig {
            epochs: epochs.max(2),
            warmup_epochs: 1,
            base_lr: 3e-3,
            batch_size: 16,
            seed,
            attack: AttackConfig {
                epsilon: 0.0,
                alpha: 0.0,
                steps: 1,
                random_init: false,
                pixel_min: 0.0,
                pixel_max: 1.0,
            },
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&config, seed);
        for _ in 0..cfg.epochs {
            train_epoch(&mut state, &config, &train, &cfg)?;
        }
        let images = synthetic_blobs(64, CLASSES, config.image_size, 0.1, seed.wrapping_add(1))?;
        Ok(Demo {
            config,
            params: state.params,
            images,
        })
    }

    fn example(&self, index: usize) -> (Tensor, Vec<usize>) {
        self.images.batch(&[index % self.images.len()])
    }

    pub fn kept(&self, index: usize, keep: f64) -> agat::Result<KeptView> {
        let (x, y) = self.example(index);
        let model = Model::new(&self.config, &self.params);
        let policy = DropPolicy::AttentionGuided { keep };
        policy.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = model.forward(&x, &ForwardOptions::train(policy), &mut rng)?;
        let all: Vec<usize> = (0..self.config.num_patches()).collect();
        let mut layers = vec![all];
        for block in &trace.blocks[..trace.blocks.len() - 1] {
            layers.push(block.kept[0].iter().filter(|&&p| p > 0).map(|p| p - 1).collect());
        }
        let clean = model.forward(&x, &ForwardOptions::eval(), &mut rng)?;
        Ok(KeptView {
            label: y[0],
            prediction: clean.predictions()[0],
            image: x.data().to_vec(),
            layers,
        })
    }

    pub fn attack(&self, index: usize, epsilon: f64, steps: usize) -> agat::Result<AttackView> {
        let (x, y) = self.example(index);
        let model = Model::new(&self.config, &self.params);
        let cfg = if epsilon == 0.0 {
            AttackConfig {
                alpha: 0.0,
                ..AttackConfig::pgd(0.0, steps.max(1))
            }
        } else {
            AttackConfig::pgd(epsilon, steps.max(1))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(index as u64);
        let objective = VitObjective::new(model, ForwardOptions::eval());
        let adv = pgd(&objective, &x, &y, &cfg, &mut rng)?;
        let probs = |t: &Tensor, rng: &mut ChaCha8Rng| -> agat::Result<Vec<f64>> {
            Ok(softmax(model.forward(t, &ForwardOptions::eval(), rng)?.logits.data()))
        };
        let linf = x
            .data()
            .iter()
            .zip(adv.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(AttackView {
            label: y[0],
            clean_probs: probs(&x, &mut rng)?,
            adversarial_probs: probs(&adv, &mut rng)?,
            clean: x.data().to_vec(),
            adversarial: adv.data().to_vec(),
            linf,
        })
    }
}

fn to_js<T: Serialize>(r: agat::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epochs: u32) -> Result<Demo, JsError> {
        Demo::train(seed as u64, epochs as usize).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(js_name = keptPatches)]
    pub fn kept_patches(&self, index: u32, keep: f64) -> Result<String, JsError> {
        to_js(self.kept(index as usize, keep))
    }

    #[wasm_bindgen(js_name = perturb)]
    pub fn perturb(&self, index: u32, epsilon: f64, steps: u32) -> Result<String, JsError> {
        to_js(self.attack(index as usize, epsilon, steps as usize))
    }

    #[wasm_bindgen(getter, js_name = imageSize)]
    pub fn image_size(&self) -> u32 {
        self.config.image_size as u32
    }

    #[wasm_bindgen(getter, js_name = patchSize)]
    pub fn patch_size(&self) -> u32 {
        self.config.patch_size as u32
    }
}

#[wasm_bindgen(js_name = flopsTable)]
pub fn flops_table(kind: &str, target: f64) -> Result<String, JsError> {
    to_js(flops_view(kind, target))
}

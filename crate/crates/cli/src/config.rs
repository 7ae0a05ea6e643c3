//! Run configuration: a TOML file plus `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use agat::attacks::AttackConfig;
use agat::data::{load_cifar_binary, load_idx, stratified_take, synthetic_blobs, Dataset};
use agat::policy::DropPolicy;
use agat::train::TrainConfig;
use agat::vit::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::fail::{Fail, FailKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: DropPolicy,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Optimizer, schedule and attack knobs; the seed and drop policy live at the
/// top level of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub attack: AttackSpec,
    pub eval_attack: AttackSpec,
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

/// Attack settings where the step size defaults from `epsilon`: 1.25ε for
/// the single training step, 2ε/steps for evaluation PGD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub random_init: bool,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilon: 0.1,
            alpha: None,
            steps: None,
            random_init: true,
            pixel_min: 0.0,
            pixel_max: 1.0,
        }
    }
}

impl AttackSpec {
    pub fn training(self) -> AttackConfig {
        self.resolve(AttackConfig::fast_at(self.epsilon), 1)
    }

    pub fn evaluation(self) -> AttackConfig {
        let steps = self.steps.unwrap_or(10);
        self.resolve(AttackConfig::pgd(self.epsilon, steps), steps)
    }

    fn resolve(self, base: AttackConfig, steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha.unwrap_or(base.alpha),
            steps: self.steps.unwrap_or(steps),
            random_init: self.random_init,
            pixel_min: self.pixel_min,
            pixel_max: self.pixel_max,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            warmup_epochs: d.warmup_epochs,
            base_lr: d.base_lr,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            attack: AttackSpec::default(),
            eval_attack: AttackSpec::default(),
            eval_every: d.eval_every,
            eval_batch_size: d.eval_batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep at most this many examples per class (0 keeps all).
        #[serde(default)]
        train_per_class: usize,
        #[serde(default)]
        test_per_class: usize,
    },
    Cifar {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default)]
        train_per_class: usize,
        #[serde(default)]
        test_per_class: usize,
    },
    Synthetic {
        train_size: usize,
        test_size: usize,
        classes: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Relative paths resolve against `$AGAT_OUTPUT_ROOT` (default `runs`).
    pub dir: PathBuf,
    /// Record epoch wall-clock seconds; off gives byte-reproducible metrics.
    pub wall_clock: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("default"),
            wall_clock: true,
        }
    }
}

pub const OUTPUT_ROOT_VAR: &str = "AGAT_OUTPUT_ROOT";

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            base_lr: t.base_lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: self.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            attack: t.attack.training(),
            policy: self.policy,
            eval_attack: t.eval_attack.evaluation(),
            eval_every: t.eval_every,
            eval_batch_size: t.eval_batch_size,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        if self.output.dir.is_absolute() {
            return self.output.dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(&self.output.dir)
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<(), Fail> {
        self.model.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Validates the config and the existence of every data file.
    pub fn validate_for_training(&self) -> Result<&DataConfig, Fail> {
        self.validate()?;
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Fail::new(FailKind::Config, "the [data] section is required"))?;
        for path in data.files() {
            if !path.is_file() {
                return Err(Fail::new(
                    FailKind::Config,
                    format!("dataset file {} does not exist", path.display()),
                ));
            }
        }
        if let DataConfig::Synthetic { classes, .. } = data {
            if *classes != self.model.num_classes {
                return Err(Fail::new(
                    FailKind::Config,
                    format!(
                        "synthetic data has {classes} classes, model expects {}",
                        self.model.num_classes
                    ),
                ));
            }
        }
        Ok(data)
    }
}

impl DataConfig {
    pub fn files(&self) -> Vec<&Path> {
        match self {
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DataConfig::Cifar {
                train_files,
                test_files,
                ..
            } => train_files.iter().chain(test_files).map(PathBuf::as_path).collect(),
            DataConfig::Synthetic { .. } => Vec::new(),
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self, model: &ModelConfig) -> Result<(Dataset, Dataset), Fail> {
        let limit = |d: Dataset, per_class: usize| {
            if per_class == 0 {
                d
            } else {
                stratified_take(&d, per_class)
            }
        };
        let (train, test) = match self {
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_per_class,
                test_per_class,
            } => (
                limit(load_idx(train_images, train_labels)?, *train_per_class),
                limit(load_idx(test_images, test_labels)?, *test_per_class),
            ),
            DataConfig::Cifar {
                train_files,
                test_files,
                train_per_class,
                test_per_class,
            } => (
                limit(load_cifar_binary(train_files)?, *train_per_class),
                limit(load_cifar_binary(test_files)?, *test_per_class),
            ),
            DataConfig::Synthetic {
                train_size,
                test_size,
                classes,
                noise,
                seed,
            } => (
                synthetic_blobs(*train_size, *classes, model.image_size, *noise, *seed)?,
                synthetic_blobs(*test_size, *classes, model.image_size, *noise, seed.wrapping_add(1))?,
            ),
        };
        for d in [&train, &test] {
            if d.image_shape() != model.image_shape() {
                return Err(Fail::new(
                    FailKind::Data,
                    format!(
                        "{} images have shape {:?}, model expects {:?}",
                        d.split,
                        d.image_shape(),
                        model.image_shape()
                    ),
                ));
            }
            if d.num_classes > model.num_classes {
                return Err(Fail::new(
                    FailKind::Data,
                    format!(
                        "{} labels span {} classes, model has {}",
                        d.split, d.num_classes, model.num_classes
                    ),
                ));
            }
        }
        Ok((train, test))
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sections selected by a `kind` tag.
const TAGGED: [&str; 2] = ["policy", "data"];

fn tagged(value: Value) -> Value {
    let mut t = Table::new();
    t.insert("kind".into(), value);
    Value::Table(t)
}

/// Applies one `a.b.c=value` override. Assigning a scalar to a key that
/// holds a table (or to a tagged section) gives `{ kind = value }`, which is
/// how `policy` and `data` switch variant; descending through a scalar keeps
/// it as the `kind` of the new table.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<(), Fail> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Fail::new(FailKind::Config, format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Fail::new(FailKind::Config, format!("bad override key `{path}`")));
    }
    let mut value = parse_value(raw.trim());
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        let slot = table
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        if !slot.is_table() {
            *slot = tagged(slot.clone());
        }
        table = slot.as_table_mut().expect("just made a table");
    }
    let last = keys[keys.len() - 1];
    let is_tagged = keys.len() == 1 && TAGGED.contains(&last);
    if (is_tagged || matches!(table.get(last), Some(Value::Table(_)))) && !value.is_table() {
        value = tagged(value);
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads `path` (if given), applies overrides and deserializes.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Fail> {
    let mut table = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Fail::new(FailKind::Config, format!("{}: {e}", p.display())))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| Fail::new(FailKind::Config, format!("{}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Fail::new(FailKind::Config, e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Table {
        toml::from_str(
            "[model]\nimage_size = 4\npatch_size = 2\nchannels = 1\ndim = 16\nheads = 2\ndepth = 2\nnum_classes = 3\n",
        )
        .unwrap()
    }

    #[test]
    fn policy_switch_by_kind() {
        let mut t = base();
        apply_override(&mut t, "policy=agat").unwrap();
        apply_override(&mut t, "policy.keep=0.9").unwrap();
        let c: RunConfig = Value::Table(t.clone()).try_into().unwrap();
        assert_eq!(c.policy, DropPolicy::AttentionGuided { keep: 0.9 });
        apply_override(&mut t, "policy=random").unwrap();
        apply_override(&mut t, "policy.rate=0.4").unwrap();
        let c: RunConfig = Value::Table(t).try_into().unwrap();
        assert_eq!(c.policy, DropPolicy::RandomInput { rate: 0.4 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut t = base();
        apply_override(&mut t, "train.epochz=3").unwrap();
        assert!(Value::Table(t).try_into::<RunConfig>().is_err());
        let mut t = base();
        apply_override(&mut t, "colour=\"red\"").unwrap();
        assert!(Value::Table(t).try_into::<RunConfig>().is_err());
    }

    #[test]
    fn override_values_are_typed() {
        let mut t = base();
        apply_override(&mut t, "train.epochs=7").unwrap();
        apply_override(&mut t, "output.dir=some/where").unwrap();
        apply_override(&mut t, "train.attack.epsilon=0.05").unwrap();
        let c: RunConfig = Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.output.dir, PathBuf::from("some/where"));
        let attack = c.train_config().attack;
        assert_eq!((attack.epsilon, attack.alpha, attack.steps), (0.05, 1.25 * 0.05, 1));
        assert_eq!(c.train_config().eval_attack.alpha, 2.0 * 0.1 / 10.0);
    }
}

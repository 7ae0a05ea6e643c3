mod config;
mod fail;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agat::attacks::AttackConfig;
use agat::autodiff::OpKind;
use agat::flops::{calibrate, model_flops};
use agat::gradcheck::{self, GradcheckOptions};
use agat::policy::DropPolicy;
use agat::train::{
    evaluate, fit, plot_records, Checkpoint, EvalResult, MetricsRow, MetricsWriter, TrainState, CHECKPOINT_VERSION,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{load_run_config, RunConfig};
use fail::{Fail, FailKind};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "agat",
    version,
    about = "Attention-guided adversarial training for vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train a model; writes metrics, checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Clean and robust accuracy of a checkpoint on the test split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = AttackKind::Pgd)]
        attack: AttackKind,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Run config naming the data; defaults to config.toml beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-block FLOPs of the configured model and drop policy.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare every backward rule against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Corrupt one op's gradient to confirm the check notices.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Train one run per FLOPs-reduction target and drop policy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_parser = ["drop_rate"], default_value = "drop_rate")]
        axis: String,
        /// FLOPs reductions in percent.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "random,agat")]
        policies: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Fgsm,
    Pgd,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => cmd_train(&config, &overrides, resume.as_deref()),
        Command::Eval {
            checkpoint,
            attack,
            steps,
            eps,
            config,
        } => cmd_eval(&checkpoint, attack, steps, eps, config.as_deref()),
        Command::Flops { config, overrides } => cmd_flops(config.as_deref(), &overrides),
        Command::Gradcheck { seeds, inject_fault } => cmd_gradcheck(seeds, inject_fault.as_deref()),
        Command::Sweep {
            config,
            overrides,
            axis: _,
            values,
            policies,
        } => cmd_sweep(&config, &overrides, &values, &policies),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.kind.exit_code())
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Fail {
    Fail::new(FailKind::Other, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Fail> {
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

fn sha256_file(path: &Path) -> Result<String, Fail> {
    let mut file = fs::File::open(path).map_err(|e| Fail::new(FailKind::Data, format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| io_fail(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Manifest<'a> {
    agat_version: &'static str,
    checkpoint_version: u32,
    seed: u64,
    resumed_from: Option<String>,
    data_sha256: Vec<DataDigest>,
    config: &'a RunConfig,
    resolved_train: agat::train::TrainConfig,
}

#[derive(Serialize)]
struct DataDigest {
    path: String,
    sha256: String,
}

/// Everything `train` leaves behind for one finished run.
struct RunOutcome {
    last_row: Option<MetricsRow>,
    eval: Option<EvalResult>,
}

fn run_training(config: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<RunOutcome, Fail> {
    let data = config.validate_for_training()?;
    let (train, test) = data.load(&config.model)?;
    let cfg = config.train_config();
    let state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load_for(path, &config.model)?;
            if ckpt.train.seed != cfg.seed || ckpt.train.policy != cfg.policy {
                return Err(Fail::new(
                    FailKind::Checkpoint,
                    format!("{} was trained with a different seed or drop policy", path.display()),
                ));
            }
            ckpt.state
        }
        None => TrainState::new(&config.model, cfg.seed),
    };
    let mut state = state;

    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    let metrics_path = dir.join("metrics.csv");
    let plot_path = dir.join("robust.jsonl");
    if resume.is_none() {
        for p in [&metrics_path, &plot_path] {
            write_file(p, "")?;
        }
    }
    let digests = data
        .files()
        .into_iter()
        .map(|p| {
            Ok(DataDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>, Fail>>()?;
    let manifest = Manifest {
        agat_version: env!("CARGO_PKG_VERSION"),
        checkpoint_version: CHECKPOINT_VERSION,
        seed: config.seed,
        resumed_from: resume.map(|p| p.display().to_string()),
        data_sha256: digests,
        config,
        resolved_train: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Fail::new(FailKind::Other, e.to_string()))?;
    write_file(&dir.join("manifest.toml"), &text)?;
    let text = toml::to_string(config).map_err(|e| Fail::new(FailKind::Other, e.to_string()))?;
    write_file(&dir.join("config.toml"), &text)?;

    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let series = cfg.policy.name();
    let mut last_row = None;
    let eval = fit(
        &mut state,
        &config.model,
        &cfg,
        &train,
        &test,
        config.output.wall_clock,
        |row, state| {
            metrics.append(row)?;
            if row.robust_acc.is_some() {
                let mut f = fs::OpenOptions::new().append(true).create(true).open(&plot_path)?;
                std::io::Write::write_all(&mut f, plot_records(series, std::slice::from_ref(row)).as_bytes())?;
                let ckpt = Checkpoint {
                    model: config.model.clone(),
                    train: cfg.clone(),
                    state: state.clone(),
                };
                ckpt.save(&dir.join(format!("epoch-{:03}.agat", row.epoch)))?;
            }
            last_row = Some(row.clone());
            Ok(())
        },
    )?;
    let ckpt = Checkpoint {
        model: config.model.clone(),
        train: cfg,
        state,
    };
    ckpt.save(&dir.join("final.agat"))?;
    Ok(RunOutcome { last_row, eval })
}

fn cmd_train(config_path: &Path, overrides: &[String], resume: Option<&Path>) -> Result<(), Fail> {
    let config = load_run_config(Some(config_path), overrides)?;
    let dir = config.output_dir();
    let outcome = run_training(&config, &dir, resume)?;
    if let Some(r) = outcome.eval {
        println!("clean_acc {}", r.clean_acc);
        println!("robust_acc {}", r.robust_acc);
    }
    println!("output {}", dir.display());
    Ok(())
}

fn cmd_eval(ckpt_path: &Path, attack: AttackKind, steps: usize, eps: f64, config: Option<&Path>) -> Result<(), Fail> {
    let default_config;
    let config_path = match config {
        Some(p) => p,
        None => {
            default_config = ckpt_path.with_file_name("config.toml");
            &default_config
        }
    };
    let config = load_run_config(Some(config_path), &[])?;
    let ckpt = Checkpoint::load_for(ckpt_path, &config.model)?;
    let data = config.validate_for_training()?;
    let (_, test) = data.load(&config.model)?;
    let attack = match attack {
        AttackKind::Fgsm => AttackConfig {
            alpha: eps,
            ..AttackConfig::pgd(eps, 1)
        }
        .without_init(),
        AttackKind::Pgd => AttackConfig::pgd(eps, steps),
    };
    attack.validate()?;
    let cfg = config.train_config();
    let r = evaluate(
        &config.model,
        &ckpt.state.params,
        &test,
        &attack,
        cfg.eval_batch_size,
        cfg.seed,
    )?;
    println!("clean_acc {}", r.clean_acc);
    println!("robust_acc {}", r.robust_acc);
    Ok(())
}

fn cmd_flops(config: Option<&Path>, overrides: &[String]) -> Result<(), Fail> {
    let config = load_run_config(config, overrides)?;
    print!("{}", model_flops(&config.model, &config.policy)?);
    Ok(())
}

fn cmd_gradcheck(seeds: u64, fault: Option<&str>) -> Result<(), Fail> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::OPS.iter().map(|o| o.name()).collect();
            Fail::new(
                FailKind::Config,
                format!("unknown op `{name}`; expected one of {}", known.join(", ")),
            )
        })?),
    };
    let opts = GradcheckOptions {
        seeds,
        fault,
        ..GradcheckOptions::default()
    };
    let report = gradcheck::run(&opts)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Fail::new(FailKind::Other, "gradient check failed"))
    }
}

/// Stable text key of a policy, used to share runs between sweep cells.
fn policy_key(p: &DropPolicy) -> String {
    match *p {
        DropPolicy::None => "none".into(),
        DropPolicy::RandomInput { rate } => format!("random-{rate}"),
        DropPolicy::AttentionGuided { keep } => format!("agat-{keep}"),
    }
}

fn knob(p: &DropPolicy) -> String {
    match *p {
        DropPolicy::None => String::new(),
        DropPolicy::RandomInput { rate } => rate.to_string(),
        DropPolicy::AttentionGuided { keep } => keep.to_string(),
    }
}

fn cmd_sweep(config_path: &Path, overrides: &[String], values: &[f64], policies: &[String]) -> Result<(), Fail> {
    if values.is_empty() {
        return Err(Fail::new(FailKind::Config, "--values needs at least one reduction"));
    }
    for kind in policies {
        if kind != "agat" && kind != "random" {
            return Err(Fail::new(
                FailKind::Config,
                format!("unknown policy `{kind}` (agat or random)"),
            ));
        }
    }
    for &v in values {
        if !(0.0..100.0).contains(&v) {
            return Err(Fail::new(FailKind::Config, format!("reduction {v}% outside [0, 100)")));
        }
    }
    let base = load_run_config(Some(config_path), overrides)?;
    base.validate_for_training()?;
    let root = base.output_dir();

    let mut done: HashMap<String, RunOutcome> = HashMap::new();
    let mut csv =
        String::from("policy,target_reduction,achieved_reduction,knob,clean_acc,robust_acc,train_forward_flops\n");
    let mut table = format!(
        "{:<8} {:>7} {:>9} {:>9} {:>9} {:>9}\n",
        "policy", "target", "achieved", "knob", "clean", "robust"
    );
    for kind in policies {
        for &v in values {
            let (policy, achieved) = calibrate(&base.model, kind, v / 100.0)?;
            let key = policy_key(&policy);
            if !done.contains_key(&key) {
                let run = RunConfig { policy, ..base.clone() };
                let dir = root.join(&key);
                eprintln!("sweep: training {key} in {}", dir.display());
                done.insert(key.clone(), run_training(&run, &dir, None)?);
            }
            let outcome = &done[&key];
            let fmt_acc = |a: Option<f64>| a.map(|x| x.to_string()).unwrap_or_default();
            let clean = outcome.eval.map(|r| r.clean_acc);
            let robust = outcome.eval.map(|r| r.robust_acc);
            let flops = outcome.last_row.as_ref().map_or(0, |r| r.train_forward_flops);
            writeln!(
                csv,
                "{kind},{},{achieved},{},{},{},{flops}",
                v / 100.0,
                knob(&policy),
                fmt_acc(clean),
                fmt_acc(robust)
            )
            .expect("string write");
            writeln!(
                table,
                "{kind:<8} {:>6}% {:>8.1}% {:>9} {:>9} {:>9}",
                v,
                100.0 * achieved,
                knob(&policy),
                clean.map_or("-".into(), |x| format!("{x:.4}")),
                robust.map_or("-".into(), |x| format!("{x:.4}"))
            )
            .expect("string write");
        }
    }
    fs::create_dir_all(&root).map_err(|e| io_fail(&root, e))?;
    write_file(&root.join("summary.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

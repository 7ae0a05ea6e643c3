//! End-to-end acceptance checks, one line per criterion. Runs without the
//! libtest harness so the report prints in order; exits non-zero when any
//! criterion fails.

use std::path::Path;
use std::time::Instant;

use agat::attacks::{fgsm_random_init, pgd, AttackConfig, LinearClassifier, VitObjective};
use agat::data::{load_idx, stratified_take, synthetic_blobs, uniform_images, Dataset};
use agat::flops::{calibrate, model_flops};
use agat::gradcheck::{run as gradcheck, GradcheckOptions};
use agat::policy::{influence_scores, layer_keep_count, select_kept, DropPolicy};
use agat::train::{fit, Checkpoint, MetricsWriter, TrainConfig, TrainState};
use agat::vit::{ForwardOptions, Model, ModelConfig, Params};
use agat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_runtime(started: Instant, limit: f64, detail: String) -> Outcome {
    let secs = started.elapsed().as_secs_f64();
    check(secs < limit, format!("{detail}, {secs:.2}s (limit {limit}s)"))
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let config = ModelConfig::vit_base();
    let base = model_flops(&config, &DropPolicy::None).map_err(|e| e.to_string())?;
    let agat = model_flops(&config, &DropPolicy::AttentionGuided { keep: 0.9 }).map_err(|e| e.to_string())?;
    let g = 1e9;
    let ok = (base.total as f64 / 17.45e9 - 1.0).abs() <= 0.03
        && (9.8e9..=10.8e9).contains(&(agat.total as f64))
        && agat.savings() > 0.40;
    let detail = format!(
        "baseline {:.3}G, keep 0.9 {:.3}G, savings {:.4}",
        base.total as f64 / g,
        agat.total as f64 / g,
        agat.savings()
    );
    check(ok, detail.clone()).and_then(|_| within_runtime(t, 1.0, detail))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut n = 197;
    for _ in 0..11 {
        n = layer_keep_count(n, 0.9);
    }
    let fraction = (n - 1) as f64 / 196.0;
    let detail = format!("last block sees {n} tokens, patch fraction {fraction:.4}");
    check((0.30..=0.33).contains(&fraction), detail.clone()).and_then(|_| within_runtime(t, 1.0, detail))
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let report = gradcheck(&GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let detail = format!(
        "{} checks over 100 seeds, worst {} at {:.2e}",
        report.checks.len(),
        worst.name,
        worst.max_rel_error
    );
    check(report.passed(), detail.clone()).and_then(|_| within_runtime(t, 60.0, detail))
}

fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (1..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = vec![0];
    kept.extend(&order[..k - 1]);
    kept.sort_unstable();
    kept
}

fn criterion_4() -> Outcome {
    let config = ModelConfig {
        image_size: 8,
        ..ModelConfig::tiny()
    };
    let params = Params::init(&config, 3);
    let model = Model::new(&config, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let opts = ForwardOptions {
        record_attention: true,
        ..ForwardOptions::train(DropPolicy::AttentionGuided { keep: 0.5 })
    };
    let (mut row_err, mut score_err, mut forwards) = (0.0f64, 0.0f64, 0);
    for _ in 0..100 {
        let x = uniform_images(&[10, 1, 8, 8], &mut rng);
        let trace = model.forward(&x, &opts, &mut rng).map_err(|e| e.to_string())?;
        for block in &trace.blocks {
            let p = block.seq_len;
            let a = block.attention.as_ref().expect("recorded");
            for row in a.data().chunks(p) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            for per in a.data().chunks(config.heads * p * p) {
                let s: f64 = influence_scores(per, config.heads, p).iter().sum();
                score_err = score_err.max((s - p as f64).abs());
            }
            if block.kept.iter().any(|k| k.first() != Some(&0)) {
                return Err(format!("class token dropped after {forwards} forwards"));
            }
        }
        forwards += 10;
    }
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let p = rng.random_range(2..64);
        let k = rng.random_range(2..=p);
        // Coarse values so ties are common.
        let scores: Vec<f64> = (0..p).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        if select_kept(&scores, k).map_err(|e| e.to_string())? != sort_oracle(&scores, k) {
            mismatches += 1;
        }
    }
    check(
        row_err < 1e-9 && score_err < 1e-9 && mismatches == 0,
        format!(
            "row sums off by {row_err:.1e}, score sums off by {score_err:.1e}, \
             {mismatches}/10000 selection mismatches, class token kept in {forwards}/1000 forwards"
        ),
    )
}

fn criterion_5() -> Outcome {
    let config = ModelConfig {
        image_size: 8,
        ..ModelConfig::tiny()
    };
    let params = Params::init(&config, 5);
    let model = Model::new(&config, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = uniform_images(&[100, 1, 8, 8], &mut rng);
    let full = model
        .forward(
            &x,
            &ForwardOptions::train(DropPolicy::AttentionGuided { keep: 1.0 }),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
    let none = model
        .forward(&x, &ForwardOptions::train(DropPolicy::None), &mut rng)
        .map_err(|e| e.to_string())?;
    let diff = full
        .logits
        .data()
        .iter()
        .zip(none.logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        diff <= 1e-12,
        format!("max logit difference {diff:.1e} over 100 inputs"),
    )
}

fn criterion_6() -> Outcome {
    let config = ModelConfig::tiny();
    let params = Params::init(&config, 6);
    let objective = VitObjective::new(
        Model::new(&config, &params),
        ForwardOptions::train(DropPolicy::AttentionGuided { keep: 0.6 }),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut attacked = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for eps in [0.0, 0.05, 0.1] {
        for round in 0..34 {
            let x = uniform_images(&[10, 1, 4, 4], &mut rng);
            let y: Vec<usize> = (0..10).map(|i| (i + round) % 3).collect();
            let cfg = AttackConfig {
                alpha: if eps == 0.0 { 0.0 } else { 0.25 * eps },
                ..AttackConfig::pgd(eps, 5)
            };
            let adv = if round % 2 == 0 {
                pgd(&objective, &x, &y, &cfg, &mut rng)
            } else {
                fgsm_random_init(&objective, &x, &y, &AttackConfig::fast_at(eps), &mut rng)
            }
            .map_err(|e| e.to_string())?;
            for (a, b) in adv.data().iter().zip(x.data()) {
                worst_excess = worst_excess.max((a - b).abs() - eps);
                if !(0.0..=1.0).contains(a) {
                    return Err(format!("pixel {a} left the box at eps {eps}"));
                }
            }
            if eps == 0.0 && adv != x {
                return Err("eps = 0 changed the input".into());
            }
            let plain = AttackConfig {
                alpha: 1.25 * eps,
                ..AttackConfig::pgd(eps, 1)
            }
            .without_init();
            let one = pgd(&objective, &x, &y, &plain, &mut ChaCha8Rng::seed_from_u64(round as u64));
            let fast = fgsm_random_init(&objective, &x, &y, &plain, &mut ChaCha8Rng::seed_from_u64(round as u64));
            let (one, fast) = (one.map_err(|e| e.to_string())?, fast.map_err(|e| e.to_string())?);
            if one
                .data()
                .iter()
                .zip(fast.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(format!("PGD-1 and FGSM differ at eps {eps}"));
            }
            attacked += 10;
        }
    }
    if worst_excess > 1e-12 {
        return Err(format!("perturbation exceeds eps by {worst_excess:.1e}"));
    }

    let mut sign_mismatches = 0;
    for trial in 0..50 {
        let features = rng.random_range(2..20);
        let weight = Tensor::new(
            &[features, 2],
            (0..2 * features).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let model = LinearClassifier {
            weight: weight.clone(),
            bias: Tensor::new(&[2], vec![0.1, -0.1]).map_err(|e| e.to_string())?,
        };
        let x = Tensor::new(
            &[1, features],
            (0..features).map(|_| rng.random_range(0.3..0.7)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let label = trial % 2;
        let adv = pgd(&model, &x, &[label], &AttackConfig::pgd(0.1, 20), &mut rng).map_err(|e| e.to_string())?;
        let w = weight.data();
        for f in 0..features {
            let gap = w[f * 2 + (1 - label)] - w[f * 2 + label];
            let delta = adv.data()[f] - x.data()[f];
            if (delta - 0.1 * gap.signum()).abs() > 1e-12 {
                sign_mismatches += 1;
            }
        }
    }
    check(
        sign_mismatches == 0,
        format!(
            "{attacked} examples attacked, max overshoot {worst_excess:.1e}, PGD-1 = FGSM bitwise, \
             {sign_mismatches} linear sign mismatches"
        ),
    )
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Run {
    robust: f64,
    clean: f64,
    epoch_flops: u64,
}

fn mnist() -> Option<(Dataset, Dataset)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .ok()?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).ok()?;
    Some((stratified_take(&train, 100), stratified_take(&test, 30)))
}

fn train_run(train: &Dataset, test: &Dataset, policy: DropPolicy, seed: u64) -> Result<Run, String> {
    let config = ModelConfig::mnist();
    let cfg = TrainConfig {
        epochs: 15,
        warmup_epochs: 2,
        base_lr: 3e-3,
        batch_size: 16,
        seed,
        policy,
        attack: AttackConfig::fast_at(0.1),
        eval_attack: AttackConfig::pgd(0.1, 20),
        eval_every: 0,
        eval_batch_size: 100,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config, seed);
    let mut epoch_flops = 0;
    let last = fit(&mut state, &config, &cfg, train, test, false, |row, _| {
        epoch_flops = row.train_forward_flops;
        Ok(())
    })
    .map_err(|e| e.to_string())?
    .expect("final epoch evaluates");
    Ok(Run {
        robust: last.robust_acc,
        clean: last.clean_acc,
        epoch_flops,
    })
}

struct Sweep {
    none: Vec<Run>,
    agat: [Vec<Run>; 2],
    random: [Vec<Run>; 3],
    baseline_flops: u64,
    agat_flops: u64,
}

fn mean(runs: &[Run], f: impl Fn(&Run) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn sweep() -> Result<Sweep, String> {
    let (train, test) = mnist().ok_or("MNIST subset not found under data/mnist-5k")?;
    let config = ModelConfig::mnist();
    let policy = |kind: &str, target: f64| calibrate(&config, kind, target).map(|c| c.0).map_err(|e| e.to_string());
    let runs = |p: DropPolicy| -> Result<Vec<Run>, String> {
        SEEDS
            .iter()
            .map(|&s| {
                let t = Instant::now();
                let r = train_run(&train, &test, p, s)?;
                eprintln!(
                    "  {:?} seed {s}: clean {:.3} robust {:.3} ({:.0}s)",
                    p,
                    r.clean,
                    r.robust,
                    t.elapsed().as_secs_f64()
                );
                Ok(r)
            })
            .collect()
    };
    let agat40 = policy("agat", 0.4)?;
    Ok(Sweep {
        none: runs(DropPolicy::None)?,
        agat: [runs(agat40)?, runs(policy("agat", 0.6)?)?],
        random: [
            runs(policy("random", 0.2)?)?,
            runs(policy("random", 0.4)?)?,
            runs(policy("random", 0.6)?)?,
        ],
        baseline_flops: model_flops(&config, &DropPolicy::None)
            .map_err(|e| e.to_string())?
            .total,
        agat_flops: model_flops(&config, &agat40).map_err(|e| e.to_string())?.total,
    })
}

fn criterion_7(s: &Sweep) -> Outcome {
    let robust = |r: &Run| r.robust;
    let (none, agat, random) = (
        mean(&s.none, robust),
        mean(&s.agat[0], robust),
        mean(&s.random[1], robust),
    );
    // One attack forward and one update forward per training example.
    let examples = 2 * 1000;
    let consistent = s.none.iter().all(|r| r.epoch_flops == examples * s.baseline_flops)
        && s.agat[0].iter().all(|r| r.epoch_flops == examples * s.agat_flops);
    let ratio = s.agat[0][0].epoch_flops as f64 / s.none[0].epoch_flops as f64;
    let a = (agat - none).abs() <= 0.05;
    let b = agat - random > 0.02;
    let c = consistent && ratio <= 0.62;
    check(
        a && b && c,
        format!(
            "robust mean none {none:.3}, agat-40 {agat:.3}, random-40 {random:.3}; \
             (a) gap {:.3} {}, (b) margin {:.3} {}, (c) flops ratio {ratio:.3} {}",
            (agat - none).abs(),
            verdict(a),
            agat - random,
            verdict(b),
            verdict(c)
        ),
    )
}

fn criterion_9(s: &Sweep) -> Outcome {
    let robust = |r: &Run| r.robust;
    let agat: Vec<f64> = s.agat.iter().map(|r| mean(r, robust)).collect();
    let random: Vec<f64> = s.random.iter().map(|r| mean(r, robust)).collect();
    let a = agat[1] < agat[0];
    let r = random[0] > random[1] && random[1] > random[2];
    check(
        a && r,
        format!(
            "agat 40/60 {:.3}/{:.3} {}, random 20/40/60 {:.3}/{:.3}/{:.3} {}",
            agat[0],
            agat[1],
            verdict(a),
            random[0],
            random[1],
            random[2],
            verdict(r)
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "missed"
    }
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ModelConfig {
        image_size: 8,
        num_classes: 2,
        ..ModelConfig::tiny()
    };
    let train = synthetic_blobs(60, 2, 8, 0.1, 1).map_err(|e| e.to_string())?;
    let test = synthetic_blobs(20, 2, 8, 0.1, 2).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 20,
        eval_every: 1,
        eval_batch_size: 20,
        eval_attack: AttackConfig::pgd(0.1, 3),
        policy: DropPolicy::AttentionGuided { keep: 0.6 },
        ..TrainConfig::default()
    };
    let run = |name: &str| -> Result<(Vec<u8>, TrainState), String> {
        let path = dir.path().join(name);
        let mut writer = MetricsWriter::open(&path).map_err(|e| e.to_string())?;
        let mut state = TrainState::new(&config, 4);
        fit(&mut state, &config, &cfg, &train, &test, false, |row, _| {
            writer.append(row)
        })
        .map_err(|e| e.to_string())?;
        Ok((std::fs::read(&path).map_err(|e| e.to_string())?, state))
    };
    let (a, state) = run("a.csv")?;
    let (b, _) = run("b.csv")?;
    if a != b {
        return Err("metrics CSVs of identical runs differ".into());
    }

    let path = dir.path().join("run.agat");
    let ckpt = Checkpoint {
        model: config.clone(),
        train: cfg.clone(),
        state,
    };
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    Checkpoint::load(&path)
        .map_err(|e| e.to_string())?
        .save(&path)
        .map_err(|e| e.to_string())?;
    let second = std::fs::read(&path).map_err(|e| e.to_string())?;
    if first != second {
        return Err("save, load, save changed the checkpoint bytes".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut rejected = 0;
    let trials = 200;
    for i in 0..trials {
        let mut bad = first.clone();
        if i % 4 == 0 {
            bad.truncate(rng.random_range(0..first.len()));
        } else {
            let at = rng.random_range(0..bad.len());
            bad[at] ^= 1 << rng.random_range(0..8);
        }
        rejected += Checkpoint::decode(&bad).is_err() as usize;
    }
    check(
        rejected == trials,
        format!(
            "{}-byte CSVs identical, {}-byte checkpoint round-trips, {rejected}/{trials} corruptions rejected",
            a.len(),
            first.len()
        ),
    )
}

fn main() {
    // Behave like a test binary when libtest flags are passed (e.g. `--list`).
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u8, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
    ];
    let started = Instant::now();
    eprintln!("training 18 MNIST runs for criteria 7 and 9");
    match sweep() {
        Ok(s) => {
            eprintln!("  sweep took {:.0}s", started.elapsed().as_secs_f64());
            results.push((7, criterion_7(&s)));
            results.push((8, criterion_8()));
            results.push((9, criterion_9(&s)));
        }
        Err(e) => {
            results.push((7, Err(e.clone())));
            results.push((8, criterion_8()));
            results.push((9, Err(e)));
        }
    }
    let mut failed = 0;
    for (n, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

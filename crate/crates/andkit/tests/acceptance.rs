//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use andkit::affinity::Neighbourhood;
use andkit::dataio::{generate_blobs, BlobSpec, Dataset};
use andkit::encoder::{backward, forward, Activation, EncoderConfig, EncoderParams};
use andkit::evaluation::{knn_accuracy, LabelMonitor, DEFAULT_EVAL_TAU, DEFAULT_KNN_K};
use andkit::memory_bank::FeatureBank;
use andkit::numerics::{norm, Mat64, SeededRng};
use andkit::objective::{instance_term, neighbourhood_term, round_batch_loss};
use andkit::pipeline::{
    select_anchors, selected_count, train, train_with, Curriculum, NeighbourhoodMode, RoundPlan, TrainConfig,
    WarmStart,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Norm-wise relative error; absolute when both vectors are tiny.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn random_members(rng: &mut SeededRng, anchor: usize, n: usize) -> Vec<usize> {
    let size = 1 + rng.below(n);
    let mut members = vec![anchor];
    while members.len() < size {
        let j = rng.below(n);
        if !members.contains(&j) {
            members.push(j);
        }
    }
    members
}

fn fd_feature(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|t| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[t] += h;
            xm[t] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(2024);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = 2 + rng.below(15);
        let d = 2 + rng.below(7);
        let tau = if case % 2 == 0 { 0.07 } else { 1.0 };
        let bank = FeatureBank::init(n, d, 0.5, &mut rng).unwrap();
        let i = rng.below(n);
        let x = rng.unit_vector(d);

        let inst = instance_term(i, &x, &bank, tau).unwrap();
        let fd = fd_feature(&x, |y| instance_term(i, y, &bank, tau).unwrap().loss);
        worst = worst.max(rel_err(&inst.grad, &fd));

        let nb = Neighbourhood {
            anchor: i,
            members: random_members(&mut rng, i, n),
        };
        let an = neighbourhood_term(i, &x, &nb, &bank, tau).unwrap();
        let fd = fd_feature(&x, |y| neighbourhood_term(i, y, &nb, &bank, tau).unwrap().loss);
        worst = worst.max(rel_err(&an.grad, &fd));

        // end to end: encoder parameters through normalization into the round loss
        let in_dim = 2 + rng.below(7);
        let hidden = 2 + rng.below(7);
        let activation = [Activation::Relu, Activation::Tanh, Activation::Identity][case % 3];
        let params = EncoderParams::init(&EncoderConfig {
            layer_sizes: vec![in_dim, hidden, d],
            activation,
            seed: rng.next_u64(),
        })
        .unwrap();
        let batch: Vec<usize> = {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(1 + rng.below(n));
            all
        };
        // redraw until no sample is mapped to a zero feature (all-dead ReLU units)
        let inputs = loop {
            let candidate = Mat64::from_rows(
                &batch
                    .iter()
                    .map(|_| (0..in_dim).map(|_| rng.normal()).collect())
                    .collect::<Vec<Vec<f64>>>(),
            )
            .unwrap();
            if forward(&params, &candidate).is_ok() {
                break candidate;
            }
        };
        let mut plan = RoundPlan::instance_only(n);
        plan.round = 1;
        for a in 0..n {
            plan.neighbourhoods[a] = Neighbourhood {
                anchor: a,
                members: random_members(&mut rng, a, n),
            };
            plan.selected[a] = rng.next_f64() < 0.5;
        }
        let loss_of = |p: &EncoderParams| {
            let (f, _) = forward(p, &inputs).unwrap();
            round_batch_loss(&batch, &f, &plan, &bank, tau).unwrap().mean_loss
        };
        let (feats, cache) = forward(&params, &inputs).unwrap();
        let bl = round_batch_loss(&batch, &feats, &plan, &bank, tau).unwrap();
        let analytic: Vec<f64> = backward(&params, &cache, &bl.grads).unwrap().values().copied().collect();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        for t in 0..params.num_values() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            *pp.values_mut().nth(t).unwrap() += h;
            *pm.values_mut().nth(t).unwrap() -= h;
            numeric.push((loss_of(&pp) - loss_of(&pm)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && elapsed < Duration::from_secs(10),
        format!("50 configs, max relative error {worst:.2e} (< 1e-5), {elapsed:.2?} (< 10s)"),
    )
}

fn loss_order() -> Outcome {
    let mut rng = SeededRng::new(77);
    let mut violations = 0;
    let mut worst_singleton: f64 = 0.0;
    let trials = 5000;
    for t in 0..trials {
        let n = 2 + rng.below(30);
        let d = 2 + rng.below(10);
        let tau = [0.07, 0.2, 1.0][t % 3];
        let bank = FeatureBank::init(n, d, 0.5, &mut rng).unwrap();
        let i = rng.below(n);
        let x = rng.unit_vector(d);
        let inst = instance_term(i, &x, &bank, tau).unwrap().loss;
        let nb = Neighbourhood {
            anchor: i,
            members: random_members(&mut rng, i, n),
        };
        if neighbourhood_term(i, &x, &nb, &bank, tau).unwrap().loss > inst {
            violations += 1;
        }
        let single = neighbourhood_term(i, &x, &Neighbourhood::singleton(i), &bank, tau).unwrap().loss;
        worst_singleton = worst_singleton.max((single - inst).abs());
    }
    outcome(
        violations == 0 && worst_singleton <= 1e-12,
        format!("{trials} instances, {violations} order violations, singleton gap {worst_singleton:.1e} (<= 1e-12)"),
    )
}

fn curriculum_exactness() -> Outcome {
    let mut rng = SeededRng::new(5);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for n in 1..=1000usize {
        // coarse values force plenty of ties
        let entropies: Vec<f64> = (0..n).map(|_| rng.below(8) as f64 * 0.25).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
        for rounds in 1..=10 {
            for r in 1..=rounds {
                let mask = select_anchors(&entropies, r, rounds).unwrap();
                let want_count = n * r / rounds;
                let mut want = vec![false; n];
                for &i in &order[..want_count] {
                    want[i] = true;
                }
                let count_ok = selected_count(n, r, rounds) == want_count
                    && mask.iter().filter(|&&s| s).count() == want_count;
                let all_ok = r < rounds || mask.iter().all(|&s| s);
                if mask != want || !count_ok || !all_ok {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} (N, r, R) cases against a sort oracle, {mismatches} mismatches"),
    )
}

fn ema_exactness() -> Outcome {
    let mut bank = FeatureBank::from_features(Mat64::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap(), 0.5).unwrap();
    bank.update_batch(&[0], &Mat64::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
    let s = 0.8f64.sqrt();
    let example_err = (bank.row(0)[0] - 0.8 / s).abs().max((bank.row(0)[1] - 0.4 / s).abs());
    let rounded_err = (bank.row(0)[0] - 0.894427).abs().max((bank.row(0)[1] - 0.447214).abs());

    let mut rng = SeededRng::new(99);
    let (n, d, eta) = (64, 8, 0.5);
    let mut bank = FeatureBank::init(n, d, eta, &mut rng).unwrap();
    let mut oracle: Vec<Vec<f64>> = (0..n).map(|i| bank.row(i).to_vec()).collect();
    let mut worst_oracle: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let updates = 10_000;
    for _ in 0..updates {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        idx.truncate(1 + rng.below(8));
        let fresh_rows: Vec<Vec<f64>> = idx.iter().map(|_| rng.unit_vector(d)).collect();
        bank.update_batch(&idx, &Mat64::from_rows(&fresh_rows).unwrap()).unwrap();
        for (&i, f) in idx.iter().zip(&fresh_rows) {
            let blended: Vec<f64> = oracle[i].iter().zip(f).map(|(o, v)| (1.0 - eta) * o + eta * v).collect();
            let len = blended.iter().map(|v| v * v).sum::<f64>().sqrt();
            oracle[i] = blended.iter().map(|v| v / len).collect();
            for (a, b) in bank.row(i).iter().zip(&oracle[i]) {
                worst_oracle = worst_oracle.max((a - b).abs());
            }
        }
    }
    for i in 0..n {
        worst_norm = worst_norm.max((norm(bank.row(i)) - 1.0).abs());
    }
    outcome(
        example_err <= 1e-12 && rounded_err < 5e-7 && worst_oracle <= 1e-12 && worst_norm <= 1e-9,
        format!(
            "example error {example_err:.1e}, {updates} random updates: oracle gap {worst_oracle:.1e}, max |norm-1| {worst_norm:.1e}"
        ),
    )
}

fn blob_split(classes: usize, sigma: f64, seed: u64) -> (Dataset, Dataset) {
    generate_blobs(&BlobSpec {
        num_classes: classes,
        per_class: 200,
        dim: 32,
        center_scale: 8.0,
        noise_sigma: sigma,
        seed,
    })
    .unwrap()
    .split_alternating()
    .unwrap()
}

fn encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        layer_sizes: vec![32, 64, 16],
        activation: Activation::Relu,
        seed,
    }
}

fn bench_config(seed: u64, curriculum: Curriculum) -> TrainConfig {
    TrainConfig {
        rounds: 4,
        epochs_per_round: 20,
        init_epochs: 20,
        batch_size: 128,
        tau: 1.0,
        k: 1,
        seed,
        curriculum,
        ..TrainConfig::default()
    }
}

fn degeneration_equivalence() -> Outcome {
    let (train_set, _) = blob_split(4, 1.0, 11);
    let base = bench_config(3, Curriculum::Progressive);
    let single = train(
        train_set.inputs(),
        &encoder(3),
        &TrainConfig {
            neighbourhoods: NeighbourhoodMode::Singleton,
            ..base.clone()
        },
    )
    .unwrap();
    let inst = train(
        train_set.inputs(),
        &encoder(3),
        &TrainConfig {
            curriculum: Curriculum::InstanceOnly,
            ..base
        },
    )
    .unwrap();
    let worst = single
        .metrics
        .iter()
        .zip(&inst.metrics)
        .map(|(a, b)| (a.mean_loss - b.mean_loss).abs())
        .fold(0.0, f64::max);
    let same_len = single.metrics.len() == inst.metrics.len();
    outcome(
        same_len && worst <= 1e-12,
        format!("{} epochs, max per-epoch loss gap {worst:.1e} (<= 1e-12)", single.metrics.len()),
    )
}

struct BenchRun {
    loo: f64,
    test: f64,
    selected_consistent: Vec<usize>,
}

fn bench_run(train_set: &Dataset, test_set: &Dataset, seed: u64, curriculum: Curriculum) -> BenchRun {
    let labels = train_set.labels().unwrap();
    let mut monitor = LabelMonitor::new(labels);
    let out = train_with(
        train_set.inputs(),
        &encoder(seed),
        &bench_config(seed, curriculum),
        WarmStart::Fresh,
        &mut monitor,
    )
    .unwrap();
    let acc = |d: &Dataset, loo| {
        knn_accuracy(d.inputs(), d.labels().unwrap(), &out.params, &out.bank, labels, DEFAULT_KNN_K, DEFAULT_EVAL_TAU, loo)
            .unwrap()
            .accuracy
    };
    BenchRun {
        loo: acc(train_set, true),
        test: acc(test_set, false),
        selected_consistent: monitor.curve.iter().map(|c| c.selected_consistent).collect(),
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn blob_learning(curves: &mut Vec<Vec<usize>>) -> Outcome {
    let start = Instant::now();
    let mut all_ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (tr, te) = blob_split(4, 1.0, seed + 100);
        let and = bench_run(&tr, &te, seed, Curriculum::Progressive);
        let base = bench_run(&tr, &te, seed, Curriculum::InstanceOnly);
        let ok = and.loo >= base.loo && and.test >= base.test && and.loo >= 0.90 && and.test >= 0.90;
        all_ok &= ok;
        parts.push(format!(
            "seed {seed}: AND loo {:.4} test {:.4} vs instance loo {:.4} test {:.4}",
            and.loo, and.test, base.loo, base.test
        ));
        curves.push(and.selected_consistent);
    }
    let elapsed = start.elapsed();
    outcome(
        all_ok && elapsed < Duration::from_secs(120),
        format!("{}; {elapsed:.2?} (< 2 min)", parts.join("; ")),
    )
}

fn curriculum_vs_one_off() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    let mut baseline_in_range = true;
    for seed in SEEDS {
        let (tr, te) = blob_split(6, 2.0, seed + 200);
        let base = bench_run(&tr, &te, seed, Curriculum::InstanceOnly);
        let prog = bench_run(&tr, &te, seed, Curriculum::Progressive);
        let once = bench_run(&tr, &te, seed, Curriculum::OneOff);
        baseline_in_range &= (0.6..=0.85).contains(&base.test);
        if prog.test >= once.test {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: curriculum {:.4} one-off {:.4} (baseline {:.4})",
            prog.test, once.test, base.test
        ));
    }
    outcome(
        wins >= 2 && baseline_in_range,
        format!("curriculum >= one-off in {wins}/3; {}", parts.join("; ")),
    )
}

fn consistency_growth(curves: &[Vec<usize>]) -> Outcome {
    let monotone = curves.iter().filter(|c| c.windows(2).all(|w| w[0] <= w[1])).count();
    let grows = curves.iter().all(|c| c.last() > c.first());
    outcome(
        curves.len() == 3 && monotone >= 2 && grows,
        format!(
            "selected consistent counts per round {curves:?}; non-decreasing in {monotone}/3, final > round 1 in all: {grows}"
        ),
    )
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_andkit");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.ands");
    let run = |args: &[&str]| Command::new(bin).args(args).status().unwrap().success();
    let d = data.to_str().unwrap();
    let r1 = dir.path().join("run1");
    let r2 = dir.path().join("run2");
    let r3 = dir.path().join("run3");
    let train = |out: &std::path::Path| {
        run(&["train", "--data", d, "--rounds", "4", "--epochs", "20", "--seed", "1", "--out", out.to_str().unwrap()])
    };
    let manifest = r1.join("manifest.json");
    let ok = run(&["generate", "--classes", "4", "--per-class", "100", "--dim", "32", "--seed", "7", "--out", d])
        && train(&r1)
        && train(&r2)
        && run(&["train", "--from-manifest", manifest.to_str().unwrap(), "--out", r3.to_str().unwrap()]);
    if !ok {
        return outcome(false, "a CLI invocation failed");
    }
    let same = |name: &str| {
        let a = fs::read(r1.join(name)).unwrap();
        a == fs::read(r2.join(name)).unwrap() && a == fs::read(r3.join(name)).unwrap()
    };
    let identical = same("checkpoint.andc") && same("metrics.jsonl");
    outcome(
        identical,
        format!("checkpoint.andc and metrics.jsonl identical across two runs and a manifest replay: {identical}"),
    )
}

fn main() -> ExitCode {
    let mut curves = Vec::new();
    type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("loss order", Box::new(loss_order)),
        ("curriculum exactness", Box::new(curriculum_exactness)),
        ("EMA exactness", Box::new(ema_exactness)),
        ("degeneration equivalence", Box::new(degeneration_equivalence)),
        ("synthetic blob learning", Box::new(|| blob_learning(&mut curves))),
        ("curriculum vs one-off", Box::new(curriculum_vs_one_off)),
        ("CLI determinism", Box::new(cli_determinism)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let o = consistency_growth(&curves);
    failed += usize::from(!o.pass);
    println!("{} consistency growth: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);

    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}

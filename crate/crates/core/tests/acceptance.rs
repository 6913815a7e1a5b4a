//! Acceptance checks. Each check writes one `PASS`/`FAIL` line straight to
//! stderr (bypassing the test harness capture) and then asserts.
//!
//! The MNIST checks read IDX files from `$SLCPL_MNIST_DIR`, or from
//! `data/mnist` at the workspace root. Without them those checks print
//! `SKIP` instead. They train 16 models and take about 100 minutes on one core.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slcpl::autodiff::{grad_check_at, Graph, Tensor};
use slcpl::data::SplitStyle;
use slcpl::eval::{self, OpenLabel};
use slcpl::harness::{self, Checkpoint, RunConfig, RunData};
use slcpl::loss::{slc_term, total_loss, LossConfig, Variant};
use slcpl::model::{init_prototypes, Encoder, EncoderConfig, InitScheme};

/// Training epochs per 6/4-split MNIST run, and for the 10-class outlier run.
const EPOCHS: usize = 3;
const OUTLIER_EPOCHS: usize = 10;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn line(name: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
    pass
}

fn skip(name: &str, why: &str) {
    let _ = writeln!(std::io::stderr(), "[SKIP] {name}: {why}");
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("SLCPL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

#[test]
fn slcpl_gradient_through_default_encoder() {
    let start = Instant::now();
    let config = EncoderConfig::default();
    let encoder = Encoder::<f64>::new(config.clone(), 3).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for batch in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + batch);
        let images = Tensor::new([8, 1, 28, 28], (0..8 * 784).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..6)).collect();
        let protos = init_prototypes::<f64>(6, config.embedding_dim, InitScheme::Gaussian, 0.1, batch).unwrap();
        let mut params: Vec<Tensor<f64>> = encoder.params().into_iter().cloned().collect();
        params.push(protos.points.clone());
        // Every element of each small tensor, a random sample of each large one.
        let mut picks = Vec::new();
        for (p, t) in params.iter().enumerate() {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            picks.extend(idx.into_iter().take(128).map(|j| (p, j)));
        }
        let cfg = LossConfig {
            variant: Variant::Slcpl,
            ..LossConfig::default()
        };
        let k = params.len() - 1;
        let report = grad_check_at(&params, 1e-5, &picks, |g, vars| {
            let x = g.input(images.clone());
            let f = encoder.forward(g, &vars[..k], x)?;
            Ok(total_loss(g, &cfg, f, vars[k], &labels)?.0)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
        checked += report.elements_checked;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 300.0;
    assert!(line(
        "gradient check",
        pass,
        &format!("max rel error {worst:.2e} (< 1e-4) over {checked} elements of 2 batches, {secs:.1}s (< 300s)")
    ));
}

fn slc_of(points: &[[f64; 2]]) -> f64 {
    let mut g = Graph::<f64>::new();
    let t = Tensor::new([points.len(), 2], points.iter().flatten().copied().collect()).unwrap();
    let p = g.input(t);
    let s = slc_term(&mut g, p).unwrap();
    g.scalar(s)
}

#[test]
fn slc_hand_values() {
    let collinear = slc_of(&[[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_zero = 0.0f64;
    for _ in 0..50 {
        let pair = [
            [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)],
            [rng.random_range(-9.0..9.0), 1.0],
        ];
        worst_zero = worst_zero.max(slc_of(&pair).abs());
    }
    for n in 3..=12 {
        let r = rng.random_range(0.1..3.0);
        let phase = rng.random_range(0.0..6.3);
        let poly: Vec<[f64; 2]> = (0..n)
            .map(|k| {
                let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        worst_zero = worst_zero.max(slc_of(&poly).abs());
    }
    let pass = (collinear - 1.0).abs() < 1e-9 && worst_zero < 1e-12;
    assert!(line(
        "slc hand values",
        pass,
        &format!(
            "collinear {collinear:.12} (1 ± 1e-9); max |slc| on pairs and regular polygons {worst_zero:.1e} (< 1e-12)"
        )
    ));
}

fn auroc_pairs(known: &[f64], unknown: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &k in known {
        for &u in unknown {
            twice += if k > u {
                2
            } else if k == u {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * known.len() * unknown.len()) as f64
}

#[test]
fn auroc_equals_pair_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = 0;
    for i in 0..200 {
        let levels = if i % 2 == 0 { 5 } else { 1000 };
        let (n, m) = (rng.random_range(1..=1000), rng.random_range(1..=1000));
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect() };
        let (k, u) = (draw(n), draw(m));
        if eval::auroc(&k, &u).unwrap() != auroc_pairs(&k, &u) {
            mismatches += 1;
        }
    }
    assert!(line(
        "auroc",
        mismatches == 0,
        &format!("{mismatches} of 200 tied instances differ from the pair count")
    ));
}

#[test]
fn openness_values() {
    let a = eval::openness(15, 30, 15).unwrap();
    let b = eval::openness(15, 100, 15).unwrap();
    let pass = (a - 0.1835).abs() <= 5e-4 && (b - 0.4892).abs() <= 5e-4;
    assert!(line(
        "openness",
        pass,
        &format!("(15,30,15) -> {a:.4} (0.1835), (15,100,15) -> {b:.4} (0.4892), ±5e-4")
    ));
}

fn macro_f1_confusion(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut cm = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let mut sum = 0.0;
    for c in 0..k {
        let tp = cm[c][c];
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm[t][c]).sum();
        let fneg: u64 = (0..k).filter(|&p| p != c).map(|p| cm[c][p]).sum();
        let d = 2 * tp + fp + fneg;
        sum += if d == 0 { 0.0 } else { (2 * tp) as f64 / d as f64 };
    }
    sum / k as f64
}

#[test]
fn macro_f1_equals_confusion_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let len = rng.random_range(1..=1000);
        let mut draw = || -> Vec<usize> { (0..len).map(|_| rng.random_range(0..=n)).collect() };
        let (p, t) = (draw(), draw());
        let label = |&c: &usize| {
            if c == n {
                OpenLabel::Unknown
            } else {
                OpenLabel::Known(c)
            }
        };
        let lp: Vec<OpenLabel> = p.iter().map(label).collect();
        let lt: Vec<OpenLabel> = t.iter().map(label).collect();
        if eval::macro_f1(&lp, &lt, n).unwrap().macro_f1 != macro_f1_confusion(&p, &t, n + 1) {
            mismatches += 1;
        }
    }
    assert!(line(
        "macro-F1",
        mismatches == 0,
        &format!("{mismatches} of 200 instances differ from the confusion matrix")
    ));
}

#[test]
fn train_is_bitwise_reproducible() {
    let Some(root) = mnist_dir() else {
        skip("determinism", "MNIST not found");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_slcpl"))
            .args([
                "train",
                "--set",
                "optim.epochs=1",
                "--set",
                "data.train_limit=3000",
                "--set",
                "data.test_limit=500",
            ])
            .args(["--set", &format!("data.root={:?}", root.to_str().unwrap())])
            .env("SLCPL_OUTPUT_DIR", dir.path().join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        bytes.push(std::fs::read(dir.path().join(run).join("seed-0/checkpoint.bin")).unwrap());
    }
    let path = Path::new("checkpoint");
    let (a, b) = (
        Checkpoint::from_bytes(&bytes[0], path).unwrap(),
        Checkpoint::from_bytes(&bytes[1], path).unwrap(),
    );
    let same_traj = a.trajectory.len() == b.trajectory.len()
        && a.trajectory
            .iter()
            .zip(&b.trajectory)
            .all(|(x, y)| x.to_bits() == y.to_bits());
    let pass = same_traj && bytes[0] == bytes[1] && !a.trajectory.is_empty();
    assert!(line(
        "determinism",
        pass,
        &format!(
            "{} batch losses and {}-byte checkpoints identical: {pass}",
            a.trajectory.len(),
            bytes[0].len()
        )
    ));
}

struct Trained {
    variant: Variant,
    seed: u64,
    ckpt: Checkpoint,
    closed_accuracy: f64,
    auroc: f64,
    radii_std: f64,
}

fn base_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.root = root.to_path_buf();
    c.optim.epochs = EPOCHS;
    c.eval.validate = false;
    c
}

fn train_and_eval(config: &RunConfig, data: &RunData) -> (Checkpoint, slcpl::eval::EvalReport) {
    let t = Instant::now();
    let ckpt = harness::train(config, data, |_, _| {}).unwrap();
    let emb = harness::embed(&ckpt.model, data, 256).unwrap();
    let report = harness::evaluate(&ckpt, data, &emb, config.eval.percentile, config.eval.bins).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "  {} seed {}: closed acc {:.4}, auroc {:.4}, {:.0}s",
        config.loss.variant,
        config.seed,
        report.closed_accuracy,
        report.auroc,
        t.elapsed().as_secs_f64()
    );
    (ckpt, report)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn mnist_open_set() {
    let names = [
        "mnist accuracy/auroc",
        "variant ordering",
        "unknowns nearer centre",
        "radius spread",
        "mnist + noise macro-F1",
    ];
    let Some(root) = mnist_dir() else {
        names.iter().for_each(|n| skip(n, "MNIST not found"));
        return;
    };
    let (train_full, test_full) = harness::load_dataset(harness::DatasetKind::Mnist, &root).unwrap();

    let mut runs: Vec<Trained> = Vec::new();
    for &seed in &SEEDS {
        let mut cfg = base_config(&root);
        cfg.seed = seed;
        let data = harness::prepare_run_data(&cfg, &train_full, &test_full).unwrap();
        for variant in [Variant::Slcpl, Variant::Gcpl, Variant::Pl] {
            cfg.loss.variant = variant;
            let (ckpt, report) = train_and_eval(&cfg, &data);
            let radii = ckpt.model.prototypes.radii();
            runs.push(Trained {
                variant,
                seed,
                closed_accuracy: report.closed_accuracy,
                auroc: report.auroc,
                radii_std: eval::mean_std(&radii).1,
                ckpt,
            });
        }
    }
    let of = |v: Variant| runs.iter().filter(move |r| r.variant == v);
    let mut results = Vec::new();

    let acc = mean(of(Variant::Slcpl).map(|r| r.closed_accuracy));
    let au = mean(of(Variant::Slcpl).map(|r| r.auroc));
    results.push(line(
        names[0],
        acc >= 0.985 && au >= 0.96,
        &format!(
            "SLCPL over {} seeds, {EPOCHS} epochs: mean closed acc {acc:.4} (>= 0.985), mean AUROC {au:.4} (>= 0.96)",
            SEEDS.len()
        ),
    ));

    let (s, g, p) = (
        au,
        mean(of(Variant::Gcpl).map(|r| r.auroc)),
        mean(of(Variant::Pl).map(|r| r.auroc)),
    );
    results.push(line(
        names[1],
        s >= g && g >= p - 0.005,
        &format!("mean AUROC SLCPL {s:.4} >= GCPL {g:.4} >= PL {p:.4} - 0.005"),
    ));

    // Unknown digits plus uniform noise against known test digits, by
    // distance to the prototype centroid.
    let mut detail = Vec::new();
    let mut all = true;
    for r in of(Variant::Slcpl) {
        let mut cfg = r.ckpt.config.clone();
        cfg.data.noise = 1000;
        let data = harness::prepare_run_data(&cfg, &train_full, &test_full).unwrap();
        let known = harness::encode_all(&r.ckpt.model.encoder, &data.test_known.images, 256).unwrap();
        let unknown = harness::encode_all(&r.ckpt.model.encoder, &data.test_unknown.images, 256).unwrap();
        let center = r.ckpt.model.prototypes.centroid();
        let km = eval::median(&eval::distances_to(&known, &center).unwrap()).unwrap();
        let um = eval::median(&eval::distances_to(&unknown, &center).unwrap()).unwrap();
        all &= um < km;
        detail.push(format!("seed {} {um:.3} < {km:.3}", r.seed));
    }
    results.push(line(
        names[2],
        all,
        &format!("median unknown vs known distance: {}", detail.join(", ")),
    ));

    let mut detail = Vec::new();
    let mut all = true;
    for &seed in &SEEDS {
        let sd = |v| {
            runs.iter()
                .find(|r| r.variant == v && r.seed == seed)
                .unwrap()
                .radii_std
        };
        let (s, g) = (sd(Variant::Slcpl), sd(Variant::Gcpl));
        all &= 5.0 * s <= g;
        detail.push(format!("seed {seed} {:.1}x", g / s));
    }
    results.push(line(
        names[3],
        all,
        &format!("radius std GCPL / SLCPL (>= 5x): {}", detail.join(", ")),
    ));
    drop(runs);

    let mut cfg = base_config(&root);
    cfg.data.split = SplitStyle::Outlier;
    cfg.data.n_known = 10;
    cfg.data.noise = 10_000;
    cfg.optim.epochs = OUTLIER_EPOCHS;
    let data = harness::prepare_run_data(&cfg, &train_full, &test_full).unwrap();
    let (_, report) = train_and_eval(&cfg, &data);
    let f1 = report.macro_f1.unwrap();
    results.push(line(
        names[4],
        f1 >= 0.90,
        &format!(
            "10 known + 10000 noise, {OUTLIER_EPOCHS} epochs, percentile {}: macro-F1 {f1:.4} (>= 0.90)",
            cfg.eval.percentile
        ),
    ));

    assert!(results.iter().all(|&p| p), "some MNIST acceptance checks failed");
}

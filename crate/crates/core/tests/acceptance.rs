//! End-to-end acceptance checks. Each test prints one `[n] name: PASS|FAIL`
//! line. The trained-model checks (5 to 8) share one set of runs on the
//! default synthetic corpus, trained once on first use.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mwp_core::corpus::{evaluate_expression, parse_prefix, EvalError, ExprError, Symbols};
use mwp_core::diff::primitive_suite;
use mwp_core::experiments::{
    edge_influence, mean_std, BaselineReport, ExperimentReport, Influence, Prepared, RunConfig, Runner, Variant,
};
use mwp_core::knowledge::kl_bernoulli;
use mwp_core::selftest::elbo_gradient_error;
use mwp_core::solver::{EdgeMode, EdgeRef, Model};
use mwp_core::synth::{generate_corpus, SynthConfig};
use mwp_core::training::{evaluate, Checkpoint, TrainConfig, Trainer};

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    println!("[{id}] {name}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut worst = ("none", 0.0_f64);
    for (name, err) in primitive_suite(2024).unwrap() {
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let full = elbo_gradient_error(3).unwrap();
    let elapsed = start.elapsed();
    let passed = worst.1 < 1e-4 && full < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient fidelity",
        passed,
        &format!("worst primitive {} {:.2e}, full loss {full:.2e}, {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    );
    assert!(passed);
}

#[test]
fn expression_oracle() {
    let symbols = Symbols::default();
    let expr = parse_prefix(&["+", "*", "NUM1", "NUM2", "NUM3"], 3, &symbols).unwrap();
    let value = evaluate_expression(&expr, &[3.0, 2.0, 2.0], &symbols).unwrap();
    let div = parse_prefix(&["/", "NUM1", "-", "NUM2", "NUM3"], 3, &symbols).unwrap();
    let div_zero = evaluate_expression(&div, &[3.0, 2.0, 2.0], &symbols);
    let underflow = parse_prefix(&["+", "NUM1"], 1, &symbols);
    let leftover = parse_prefix(&["NUM1", "NUM2"], 2, &symbols);
    let passed = value == 8.0
        && div_zero == Err(EvalError::DivisionByZero)
        && matches!(underflow, Err(ExprError::Underflow { .. }))
        && matches!(leftover, Err(ExprError::Leftover { count: 1 }));
    report(2, "expression oracle", passed, &format!("value {value}, {div_zero:?}, {underflow:?}, {leftover:?}"));
    assert!(passed);
}

#[test]
fn bernoulli_kl() {
    // Closed form at (0.5, 0.1): 0.5 ln 5 + 0.5 ln(5/9).
    let expected = 0.5 * 5f64.ln() + 0.5 * (5.0f64 / 9.0).ln();
    let at = kl_bernoulli(0.5, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut min = f64::INFINITY;
    let mut max_at_equal = 0.0_f64;
    for _ in 0..1000 {
        let p: f64 = rand::Rng::random_range(&mut rng, 0.0..1.0);
        let d: f64 = rand::Rng::random_range(&mut rng, 0.001..0.999);
        min = min.min(kl_bernoulli(p, d));
        max_at_equal = max_at_equal.max(kl_bernoulli(d, d).abs());
    }
    let passed = max_at_equal < 1e-12 && (at - expected).abs() < 1e-12 && (at - 0.5108).abs() < 1e-4 && min >= 0.0;
    report(
        3,
        "KL correctness",
        passed,
        &format!("KL(0.5||0.1) = {at:.6}, max |KL(d||d)| {max_at_equal:.1e}, min over random pairs {min:.2e}"),
    );
    assert!(passed);
}

#[test]
fn overfit_sanity() {
    let start = Instant::now();
    let corpus = generate_corpus(
        &SynthConfig {
            train_size: 10,
            validation_size: 4,
            test_size: 4,
            ..SynthConfig::default()
        },
        11,
    )
    .unwrap();
    let prepared = Prepared::new(corpus.train, corpus.validation, corpus.test, Some(corpus.kg), 1);
    let mut config = TrainConfig::default();
    config.model.dim = 32;
    config.model.dropout = 0.0;
    config.train.epochs = 300;
    config.train.patience = 300;
    config.train.batch_size = 2;
    config.train.lr = 0.01;
    config.train.seed = 5;
    let mut trainer = prepared.trainer(&config).unwrap();
    trainer.run().unwrap();
    let (accuracy, _) = evaluate(&trainer.model, &trainer.store, &prepared.train).unwrap();
    let nll = trainer.metrics.last().unwrap().nll;
    let elapsed = start.elapsed();
    let passed = accuracy == 1.0 && nll < 0.05 && elapsed < Duration::from_secs(120);
    report(
        4,
        "overfit sanity",
        passed,
        &format!("train accuracy {accuracy}, NLL {nll:.4}, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(passed);
}

/// Settings of the shared runs on the default corpus.
fn trained_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.dim = 32;
    c.train.lr = 0.003;
    c.train.epochs = 45;
    c.train.patience = 45;
    c.knowledge.lambda_kl = 0.01;
    c
}

struct Trained {
    baselines: BaselineReport,
    baselines_time: Duration,
    ablation: ExperimentReport,
    ablation_time: Duration,
    sweep: ExperimentReport,
    backbone: ExperimentReport,
    sweep_time: Duration,
    true_edges: Vec<Influence>,
    false_edges: Vec<Influence>,
    /// Planted word–operator edges without an applicable test problem.
    skipped: usize,
    influence_time: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = trained_config();
        let data = Box::leak(Box::new(Prepared::load(&config.data).unwrap()));
        let mut runner = Runner::new(data, config.clone());
        runner.progress = Some(Box::new(|v, a, s, e| {
            if e % 10 == 0 {
                eprintln!("  {v} alpha={a} seed={s} epoch {e}");
            }
        }));

        let t = Instant::now();
        let baselines = runner.baselines(0.2).unwrap();
        let baselines_time = t.elapsed();

        let t = Instant::now();
        let ablation = runner.grid(&[Variant::Full, Variant::NoSe, Variant::NoRe], &[0.2]).unwrap();
        let ablation_time = t.elapsed();

        let t = Instant::now();
        let sweep = runner.grid(&[Variant::Full], &[0.0, 0.2, 0.4, 0.6]).unwrap();
        let backbone = runner.grid(&[Variant::Backbone], &[0.0]).unwrap();
        let sweep_time = t.elapsed();

        let t = Instant::now();
        let seed = config.experiment.seeds[0];
        let run = runner.run(Variant::Full, 0.2, seed).unwrap();
        let (model, store) = run.model();
        let truth = data.truth.as_ref().unwrap();
        let mut planted: Vec<(usize, usize)> = truth.wo.iter().copied().collect();
        planted.sort_unstable();
        let mut true_edges = Vec::new();
        let mut skipped = 0;
        for &(w, c) in &planted {
            match edge_influence(model, store, &data.test, EdgeRef::Wo(w, c)) {
                Ok(i) => true_edges.push(i),
                Err(_) => skipped += 1,
            }
        }
        let false_edges = random_false_edges(model, store, data, &truth.wo, planted.len(), seed);
        let influence_time = t.elapsed();

        Trained {
            baselines,
            baselines_time,
            ablation,
            ablation_time,
            sweep,
            backbone,
            sweep_time,
            true_edges,
            false_edges,
            skipped,
            influence_time,
        }
    })
}

/// Influence of `n` random non-planted word–operator edges over planted-graph
/// words that occur in the test split.
fn random_false_edges(
    model: &Model,
    store: &mwp_core::diff::ParamStore,
    data: &Prepared,
    planted: &HashSet<(usize, usize)>,
    n: usize,
    seed: u64,
) -> Vec<Influence> {
    let kg = data.kg.as_ref().unwrap();
    let mut pool: Vec<(usize, usize)> = kg
        .words
        .iter()
        .filter_map(|w| model.vocab.word_index(w))
        .flat_map(|w| (0..model.vocab.symbols.num_operators()).map(move |c| (w, c)))
        .filter(|e| !planted.contains(e))
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.into_iter()
        .filter_map(|(w, c)| edge_influence(model, store, &data.test, EdgeRef::Wo(w, c)).ok())
        .take(n)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).0
}

#[test]
fn knowledge_recovery() {
    let t = trained();
    let wo: Vec<f64> = t.ablation.rows.iter().filter(|r| r.variant == "full").filter_map(|r| r.p_at_k_wo).collect();
    let wo_mean = mean(&wo);
    let method = |m: &str| mean(&t.baselines.precisions(m));
    let (learned, lp, cooccur, tfidf) = (method("learned"), method("lp"), method("cooccur"), method("tfidf"));
    let passed = wo_mean >= 0.75
        && learned > lp
        && learned > cooccur
        && learned > tfidf
        && minutes(t.baselines_time) < 30.0;
    report(
        5,
        "knowledge recovery",
        passed,
        &format!(
            "wo P@12 {wo_mean:.3} over {} seeds; ww P@20 learned {learned:.3}, lp {lp:.3}, cooccur {cooccur:.3}, tfidf {tfidf:.3}; {:.1} min",
            wo.len(),
            minutes(t.baselines_time)
        ),
    );
    assert!(passed);
}

#[test]
fn ablation_direction() {
    let t = trained();
    let full = t.ablation.accuracies("full", 0.2);
    let mut parts = Vec::new();
    let mut passed = minutes(t.ablation_time) < 45.0;
    for variant in ["no_SE", "no_RE"] {
        let other = t.ablation.accuracies(variant, 0.2);
        let wins = full.iter().zip(&other).filter(|(f, o)| f >= o).count();
        passed &= mean(&full) >= mean(&other) && wins >= 4;
        parts.push(format!("{variant} {:.4} {other:.3?} ({wins}/{} seeds full >=)", mean(&other), other.len()));
    }
    report(
        6,
        "ablation direction",
        passed,
        &format!("full {:.4} {full:.3?}; {}; {:.1} min", mean(&full), parts.join(", "), minutes(t.ablation_time)),
    );
    assert!(passed);
}

#[test]
fn alpha_trend() {
    let t = trained();
    let alphas = [0.0, 0.2, 0.4, 0.6];
    let stats: Vec<(f64, f64)> = alphas.iter().map(|&a| mean_std(&t.sweep.accuracies("full", a))).collect();
    let mut inversions = 0;
    let mut small = true;
    for w in stats.windows(2) {
        let drop = w[0].0 - w[1].0;
        if drop > 0.0 {
            inversions += 1;
            small &= drop <= w[0].1.max(w[1].1);
        }
    }
    let backbone = mean(&t.backbone.accuracies("backbone", 0.0));
    let gain = stats[0].0 - backbone;
    let passed = inversions <= 1 && small && gain >= 0.01 && minutes(t.sweep_time) < 60.0;
    let curve: Vec<String> = alphas.iter().zip(&stats).map(|(a, (m, s))| format!("{a}: {m:.4}±{s:.4}")).collect();
    report(
        7,
        "alpha trend",
        passed,
        &format!(
            "{}; {inversions} inversion(s); backbone {backbone:.4}, alpha 0 gain {gain:+.4}; {:.1} min",
            curve.join(", "),
            minutes(t.sweep_time)
        ),
    );
    assert!(passed);
}

#[test]
fn effective_knowledge() {
    let t = trained();
    let positive = t.true_edges.iter().filter(|i| i.delta > 0.0).count();
    let deltas = |v: &[Influence]| mean(&v.iter().map(|i| i.delta).collect::<Vec<_>>());
    let (true_mean, false_mean) = (deltas(&t.true_edges), deltas(&t.false_edges));
    let passed = positive >= 10 && false_mean <= true_mean;
    report(
        8,
        "effective knowledge",
        passed,
        &format!(
            "{positive}/{} planted wo edges with positive influence ({} without test problems); mean delta true {true_mean:.4}, random false {false_mean:.4} over {}; {:.1} min",
            t.true_edges.len(),
            t.skipped,
            t.false_edges.len(),
            minutes(t.influence_time)
        ),
    );
    assert!(passed);
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.synth.train_size = 40;
    c.data.synth.validation_size = 10;
    c.data.synth.test_size = 10;
    c.model.dim = 8;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.experiment.seeds = vec![0, 1];
    c.experiment.lp.epochs = 5;
    c
}

fn all_csvs(config: &RunConfig) -> Vec<String> {
    let data = Prepared::load(&config.data).unwrap();
    let mut runner = Runner::new(&data, config.clone());
    let ablation = runner.ablate().unwrap();
    let sweep = runner.alpha_sweep().unwrap();
    let baselines = runner.baselines(0.2).unwrap();
    let metrics = runner.run(Variant::Full, 0.2, 0).unwrap().trainer.metrics_csv();
    vec![
        ablation.csv(),
        ablation.summary_csv(),
        sweep.csv(),
        sweep.summary_csv(),
        baselines.csv(),
        baselines.summary_csv(),
        metrics,
    ]
}

fn snapshot(t: &Trainer) -> Vec<u8> {
    Checkpoint::from_trainer(t).to_bytes()
}

fn checkpoint_round_trip(dir: &std::path::Path) -> bool {
    let config = small_config();
    let data = Prepared::load(&config.data).unwrap();
    let mut train = config.train_config();
    train.train.epochs = 3;
    let mut trainer = data.trainer(&train).unwrap();
    trainer.run_epoch().unwrap();
    let path = dir.join("checkpoint.json");
    let saved = Checkpoint::from_trainer(&trainer);
    saved.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut resumed: Trainer = loaded.resume(data.train.clone(), data.validation.clone()).unwrap();
    let same_state = loaded == saved && loaded.to_bytes() == saved.to_bytes() && snapshot(&resumed) == snapshot(&trainer);
    trainer.run().unwrap();
    resumed.run().unwrap();
    let (model, _) = loaded.best_model().unwrap();
    let same_edges = matches!(model.edge_mode, EdgeMode::Learned);
    same_state && same_edges && snapshot(&resumed) == snapshot(&trainer)
}

#[test]
fn determinism_and_provenance() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let path = config.write_resolved(dir.path()).unwrap();
    let resolved = RunConfig::load(&path).unwrap();
    let first = all_csvs(&config);
    let second = all_csvs(&resolved);
    let identical = first == second;
    let lossless = checkpoint_round_trip(dir.path());
    let passed = resolved == config && identical && lossless;
    report(
        9,
        "determinism and provenance",
        passed,
        &format!("{} CSVs identical: {identical}; checkpoint lossless: {lossless}", first.len()),
    );
    assert!(passed);
}

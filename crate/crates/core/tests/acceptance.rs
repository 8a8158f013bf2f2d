//! Acceptance criteria 1–10. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use rand::seq::IndexedRandom;
use rand::Rng;
use relnn::click::{batch_logits, pairwise_logit, train_click_model, BnLoss, EncodedPair, HistoryRow, TrainConfig};
use relnn::config::RunConfig;
use relnn::datasets::{split_by_query, CLICK_SPLIT, DEFAULT_TOP_K, RATING_SPLIT};
use relnn::evaluate::evaluate_ratings;
use relnn::finetune::{finetune, FinetuneConfig};
use relnn::grad::{hinge_neg, logloss};
use relnn::metrics::{map_and_prec_at_k, ndcg_at_k, roc_auc, MetricsReport};
use relnn::pipeline::{generate, prepare, Generated, Prepared};
use relnn::synth::oracle_relevance;
use relnn::{ModelBundle, ScoringMode, TowerConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Criterion 1
const GRAD_CONFIGS: usize = 20;
const GRAD_H: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

// Criteria 2 and 3
const LOGIT_TOL: f64 = 1e-6;
const SHIFT_C: f64 = 7.5;
/// Pointwise scores move by `c` up to f64 rounding of the final addition.
const SHIFT_EXACT_TOL: f64 = 1e-12;

// Criteria 4 and 5
const LOSS_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-5;

// Criterion 6
const E2E_SEED: u64 = 1;
const E2E_STEPS: usize = 5000;
const E2E_EVAL_EVERY: usize = 100;
const BN_AUC_DEADLINE: usize = 1000;
const MIN_HELDOUT_AUC: f64 = 0.80;
const MIN_BN_AUC: f64 = 0.99;
const E2E_BUDGET: Duration = Duration::from_secs(600);
/// Click-model knobs of the acceptance world. Clicks saturate once a third of
/// the query matches, while raters only accept half; the rest follow the
/// defaults.
const E2E_REL_SCALE: f64 = 24.0;
const E2E_REL_CENTER: f64 = 0.25;
const E2E_ATTRACT_SCALE: f64 = 0.3;
const E2E_RELEVANT_FRAC: f64 = 0.6;
const E2E_QUERY_ALIAS_PROB: f64 = 0.25;
const E2E_QUERIES: usize = 5000;

// Criterion 7
const MIN_GAP_RATIO: f64 = 2.0;
const GAP_ITEMS_PER_QUERY: usize = 2;

// Criterion 8
/// Best of {100, 300, 1000, 2000} on the validation ratings.
const FINETUNE_STEPS: usize = 1000;
const MIN_FINETUNE_GAIN: f64 = 0.02;

// Criterion 10
const SPLIT_QUERIES: usize = 10_000;
const SPLIT_TOL: f64 = 0.02;

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_CONFIGS {
        let vocab = rng.random_range(3..24);
        let (params, batch) = smooth_case(&mut rng, vocab, 3, true, BnLoss::Logloss, 1.0);
        worst = worst.max(max_grad_error(&params, &batch, true, BnLoss::Logloss, 1.0, GRAD_H));
    }
    let elapsed = start.elapsed();
    ensure(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max relative error {worst:.2e} over {GRAD_CONFIGS} configs in {elapsed:.1?}"),
    )
}

fn algorithm_equivalence() -> Outcome {
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    let mut counts = Vec::new();
    for n in [2, 3, 5, 8] {
        for _ in 0..10 {
            let params = random_tower(&mut rng, 30);
            let batch = random_batch(&mut rng, 30, n);
            let refs: Vec<&EncodedPair> = batch.iter().collect();
            let (orig, neg) = batch_logits(&params, &refs, true).unwrap();
            let pairs = orig.iter().zip(naive_session_logits(&params, &batch));
            let negs = neg.iter().zip(naive_bn_logits(&params, &batch));
            for (a, b) in pairs.chain(negs) {
                worst = worst.max((a - b).abs());
            }
            if counts.last() != Some(&neg.len()) {
                counts.push(neg.len());
            }
        }
    }
    ensure(
        worst <= LOGIT_TOL && counts == [2, 6, 20, 56],
        format!("BN logit counts {counts:?}, max deviation from double loop {worst:.2e}"),
    )
}

fn antisymmetry_and_shift_invariance() -> Outcome {
    let mut rng = rng(3);
    let mut anti = 0.0f64;
    for _ in 0..1000 {
        let params = random_tower(&mut rng, 40);
        let (q, a, b) = (random_seq(&mut rng, 40, 4), random_seq(&mut rng, 40, 6), random_seq(&mut rng, 40, 6));
        let ab = pairwise_logit(&params, &q, &a, &b).unwrap();
        let ba = pairwise_logit(&params, &q, &b, &a).unwrap();
        anti = anti.max((ab + ba).abs());
    }

    let (mut logit_drift, mut score_drift) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let params = random_tower(&mut rng, 40);
        let batch = random_batch(&mut rng, 40, 6);
        let mut shifted = params.clone();
        *shifted.mlp.final_bias_mut() += SHIFT_C;
        let refs: Vec<&EncodedPair> = batch.iter().collect();
        let (o1, n1) = batch_logits(&params, &refs, true).unwrap();
        let (o2, n2) = batch_logits(&shifted, &refs, true).unwrap();
        for (a, b) in o1.iter().chain(&n1).zip(o2.iter().chain(&n2)) {
            logit_drift = logit_drift.max((a - b).abs());
        }
        for p in &batch {
            let s1 = params.score(&p.query, &p.pos).unwrap();
            let s2 = shifted.score(&p.query, &p.pos).unwrap();
            score_drift = score_drift.max((s2 - s1 - SHIFT_C).abs());
        }
    }
    ensure(
        anti <= LOGIT_TOL && logit_drift <= LOGIT_TOL && score_drift <= SHIFT_EXACT_TOL,
        format!(
            "max |F(q,a,b)+F(q,b,a)| {anti:.2e}; c={SHIFT_C}: max logit change {logit_drift:.2e}, \
             max pointwise deviation from +c {score_drift:.2e}"
        ),
    )
}

fn loss_unit_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let at_zero = [0.0, 0.25, 0.5, 1.0].iter().all(|&l| (logloss(0.0, l) - ln2).abs() < LOSS_TOL);
    let tau = logloss(2.0f64, 1.0);
    let hinge = (hinge_neg(-2.0f64, 1.0), hinge_neg(0.0f64, 1.0));
    ensure(
        at_zero && (tau - 0.126928).abs() < LOSS_TOL && hinge == (0.0, 1.0),
        format!("τ(0,ℓ)=ln 2: {at_zero}, τ(2,1)={tau:.6}, hinge_neg(-2,1)={}, hinge_neg(0,1)={}", hinge.0, hinge.1),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = rng(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=200);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64 / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if roc_auc(&scores, &labels) != brute_force_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let ndcg = ndcg_at_k(&[vec![0, 3]], 10).unwrap();
    let (map, _) = map_and_prec_at_k(&[vec![true, false, true]], 3);
    let (_, p3) = map_and_prec_at_k(&[vec![true, false, true, true]], 3);
    let map = map.unwrap();
    let p3 = p3.unwrap();
    ensure(
        mismatches == 0 && (ndcg - 0.63093).abs() < METRIC_TOL && (map - 0.83333).abs() < METRIC_TOL && p3 == 2.0 / 3.0,
        format!("AUC brute-force mismatches {mismatches}/100, NDCG {ndcg:.5}, MAP {map:.5}, P@3 {p3}"),
    )
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut total) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                total += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (total > 0.0).then(|| wins / total)
}

/// The synthetic world, its prepared data and the click models shared by
/// criteria 6–8 and 10.
struct Experiment {
    generated: Generated,
    prepared: Prepared,
    bn: (ModelBundle, Vec<HistoryRow>),
    no_bn: ModelBundle,
    bn_train_time: Duration,
}

fn e2e_config() -> RunConfig {
    let mut cfg = RunConfig { seed: E2E_SEED, ..RunConfig::default() }.resolve();
    cfg.world.rel_scale = E2E_REL_SCALE;
    cfg.world.rel_center = E2E_REL_CENTER;
    cfg.world.attract_scale = E2E_ATTRACT_SCALE;
    cfg.world.relevant_frac = E2E_RELEVANT_FRAC;
    cfg.world.query_alias_prob = E2E_QUERY_ALIAS_PROB;
    cfg.world.n_queries = E2E_QUERIES;
    cfg.tower = TowerConfig { embed_dim: 32, layers: vec![128, 64, 1], seed: E2E_SEED };
    cfg.train = TrainConfig {
        batch_size: 128,
        steps: E2E_STEPS,
        seed: E2E_SEED,
        eval_every: E2E_EVAL_EVERY,
        ..TrainConfig::default()
    };
    cfg
}

fn experiment() -> &'static Experiment {
    static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();
    EXPERIMENT.get_or_init(|| {
        let cfg = e2e_config();
        assert_eq!((cfg.world.n_terms, cfg.world.n_items, cfg.data.n_sessions), (2000, 5000, 50_000));
        let generated = generate(&cfg).unwrap();
        let prepared = prepare(&cfg, &generated.sessions, generated.ratings.clone()).unwrap();
        let train = |bn_enabled: bool| {
            let config = TrainConfig { bn_enabled, ..cfg.train.clone() };
            let (params, history) =
                train_click_model(&prepared.pairs_train, &prepared.pairs_eval, &prepared.vocab, &cfg.tower, &config)
                    .unwrap();
            (ModelBundle::from_click(prepared.vocab.clone(), params).unwrap(), history)
        };
        let start = Instant::now();
        let bn = train(true);
        let bn_train_time = start.elapsed();
        let no_bn = train(false).0;
        Experiment { generated, prepared, bn, no_bn, bn_train_time }
    })
}

fn end_to_end_learning() -> Outcome {
    let exp = experiment();
    let history = &exp.bn.1;
    let last = history.last().unwrap();
    let heldout = last.orig_auc.unwrap_or(0.0);
    let first_bn = history
        .iter()
        .find(|r| r.step < BN_AUC_DEADLINE && r.train_bn_auc.is_some_and(|a| a >= MIN_BN_AUC))
        .map(|r| r.step);
    let bn_at_deadline =
        history.iter().filter(|r| r.step < BN_AUC_DEADLINE).filter_map(|r| r.train_bn_auc).fold(0.0, f64::max);
    ensure(
        heldout >= MIN_HELDOUT_AUC && first_bn.is_some() && exp.bn_train_time < E2E_BUDGET,
        format!(
            "held-out session-pair AUC {heldout:.4} at step {}; best training-batch BN AUC before step {BN_AUC_DEADLINE} \
             {bn_at_deadline:.4} (first ≥ {MIN_BN_AUC} at {first_bn:?}); trained in {:.1?}",
            last.step, exp.bn_train_time
        ),
    )
}

/// Mean score of r = 1 items minus mean score of random r = 0 items, over
/// the held-out queries.
fn separation_gap(exp: &Experiment, model: &ModelBundle) -> f64 {
    let world = &exp.generated.world;
    let queries: BTreeSet<&str> = exp.prepared.pairs_eval.iter().map(|p| p.query.as_str()).collect();
    let mut rng = rng(7);
    let (mut matched, mut unrelated) = (Vec::new(), Vec::new());
    for q in queries {
        let relevant: Vec<&str> = world
            .items
            .iter()
            .map(|it| it.title.as_str())
            .filter(|t| oracle_relevance(q, t, world) == 1.0)
            .collect();
        matched.extend(relevant.choose_multiple(&mut rng, GAP_ITEMS_PER_QUERY).map(|t| (q, *t)));
        let mut found = 0;
        while found < GAP_ITEMS_PER_QUERY {
            let t = world.items.choose(&mut rng).unwrap().title.as_str();
            if oracle_relevance(q, t, world) == 0.0 {
                unrelated.push((q, t));
                found += 1;
            }
        }
    }
    let mean = |pairs: &[(&str, &str)]| {
        let scores = model.score_batch(pairs).unwrap();
        scores.iter().map(|&s| f64::from(s)).sum::<f64>() / scores.len() as f64
    };
    mean(&matched) - mean(&unrelated)
}

fn batch_negative_separation() -> Outcome {
    let exp = experiment();
    let bn = separation_gap(exp, &exp.bn.0);
    let no_bn = separation_gap(exp, &exp.no_bn);
    ensure(
        bn > no_bn && bn >= MIN_GAP_RATIO * no_bn,
        format!("matched − unrelated gap: BN {bn:.4}, no BN {no_bn:.4}, ratio {:.2}", bn / no_bn),
    )
}

fn finetuning_gain() -> Outcome {
    let exp = experiment();
    let [train, _, test] = &exp.prepared.ratings[..] else {
        return Err("ratings were not split in three".into());
    };
    let base = &exp.bn.0;
    let report = |mode: ScoringMode| -> MetricsReport {
        let cfg = FinetuneConfig { mode, steps: FINETUNE_STEPS, seed: E2E_SEED, ..FinetuneConfig::default() };
        evaluate_ratings(&finetune(train, base, &cfg).unwrap(), test).unwrap()
    };
    let click = report(ScoringMode::ClickOnly);
    let simple = report(ScoringMode::PointwiseSimple);
    let ensemble = report(ScoringMode::PointwiseEnsemble);
    let (c, e) = (click.roc_auc.unwrap(), ensemble.roc_auc.unwrap());
    let (sn, en) = (simple.pr_auc_neg.unwrap(), ensemble.pr_auc_neg.unwrap());
    ensure(
        e >= c + MIN_FINETUNE_GAIN && en >= sn,
        format!(
            "test ROC-AUC click_only {c:.4}, pointwise_ensemble {e:.4} (gain {:+.4}); \
             Neg PR-AUC pointwise_simple {sn:.4}, pointwise_ensemble {en:.4}",
            e - c
        ),
    )
}

fn pipeline_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|r| {
            let root = dir.path().join(r);
            let dirs = run_pipeline(&root, &config, &[]);
            let metrics = root.join("eval");
            relnn_ok(&[
                "eval",
                "--model",
                dirs[3].join("model.bin").to_str().unwrap(),
                "--input",
                dirs[1].join("ratings_test.jsonl").to_str().unwrap(),
                "--out",
                metrics.to_str().unwrap(),
            ]);
            dirs.into_iter().chain([metrics]).collect::<Vec<_>>()
        })
        .collect();
    let files = [
        (1, "vocab.txt"),
        (1, "pairs_train.jsonl"),
        (2, "model.bin"),
        (2, "history.csv"),
        (3, "model.bin"),
        (4, "metrics.json"),
    ];
    let mut differing = Vec::new();
    for (stage, name) in files {
        let a = std::fs::read(runs[0][stage].join(name)).unwrap();
        let b = std::fs::read(runs[1][stage].join(name)).unwrap();
        if a != b {
            differing.push(format!("{}/{name}", runs[0][stage].file_name().unwrap().to_string_lossy()));
        }
    }
    ensure(
        differing.is_empty(),
        format!("{} artifacts compared across two runs, differing: {differing:?}", files.len()),
    )
}

fn fractions_by_query(splits: &[Vec<String>]) -> Vec<f64> {
    let total: usize = splits.iter().map(Vec::len).sum();
    splits.iter().map(|s| s.len() as f64 / total as f64).collect()
}

fn leaks<'a>(splits: impl Iterator<Item = BTreeSet<&'a str>>) -> usize {
    let sets: Vec<_> = splits.collect();
    let mut leaked = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            leaked += sets[i].intersection(&sets[j]).count();
        }
    }
    leaked
}

fn data_pipeline_conformance() -> Outcome {
    let queries: Vec<String> = (0..SPLIT_QUERIES).map(|i| format!("query {i}")).collect();
    let mut worst = 0.0f64;
    for target in [&CLICK_SPLIT[..], &RATING_SPLIT[..]] {
        let splits = split_by_query(queries.clone(), target, E2E_SEED, |q| q.as_str()).unwrap();
        for (got, want) in fractions_by_query(&splits).iter().zip(target) {
            worst = worst.max((got - want).abs());
        }
    }

    let exp = experiment();
    let p = &exp.prepared;
    let distinct = |v: &mut dyn Iterator<Item = &str>| -> Vec<String> {
        v.map(str::to_owned).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let pair_splits = [
        distinct(&mut p.pairs_train.iter().map(|x| x.query.as_str())),
        distinct(&mut p.pairs_eval.iter().map(|x| x.query.as_str())),
    ];
    let rating_splits: Vec<Vec<String>> = p.ratings.iter().map(|s| distinct(&mut s.iter().map(|e| e.query.as_str()))).collect();
    for (splits, target) in [(&pair_splits[..], &CLICK_SPLIT[..]), (&rating_splits[..], &RATING_SPLIT[..])] {
        for (got, want) in fractions_by_query(splits).iter().zip(target) {
            worst = worst.max((got - want).abs());
        }
    }
    let leaked = leaks(pair_splits.iter().map(|s| s.iter().map(String::as_str).collect()))
        + leaks(rating_splits.iter().map(|s| s.iter().map(String::as_str).collect()));

    let mut per_query: BTreeMap<&str, usize> = BTreeMap::new();
    for pair in p.pairs_train.iter().chain(&p.pairs_eval) {
        *per_query.entry(pair.query.as_str()).or_default() += 1;
    }
    let most = per_query.values().copied().max().unwrap_or(0);
    ensure(
        worst <= SPLIT_TOL && leaked == 0 && most <= DEFAULT_TOP_K,
        format!("max split fraction error {worst:.4}, leaked queries {leaked}, most pairs for one query {most}"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("batch negative equivalence", algorithm_equivalence),
        ("antisymmetry and shift invariance", antisymmetry_and_shift_invariance),
        ("loss unit values", loss_unit_values),
        ("metric oracles", metric_oracles),
        ("end-to-end synthetic learning", end_to_end_learning),
        ("batch-negative separation", batch_negative_separation),
        ("fine-tuning gain", finetuning_gain),
        ("pipeline determinism", pipeline_determinism),
        ("data pipeline conformance", data_pipeline_conformance),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

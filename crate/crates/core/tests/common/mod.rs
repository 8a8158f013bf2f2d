#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relnn::click::{batch_forward_with_negatives, batch_loss, batch_loss_node, batch_logits, BnLoss, EncodedPair};
use relnn::grad::{Tape, Tensor};
use relnn::{TokenSeq, TowerConfig, TowerParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_seq(rng: &mut impl Rng, vocab_size: usize, max_len: usize) -> TokenSeq {
    let len = rng.random_range(0..=max_len);
    TokenSeq::new((0..len).map(|_| rng.random_range(0..vocab_size as u32)).collect())
}

pub fn random_batch(rng: &mut impl Rng, vocab_size: usize, n: usize) -> Vec<EncodedPair> {
    (0..n)
        .map(|_| EncodedPair {
            query: random_seq(rng, vocab_size, 4),
            pos: random_seq(rng, vocab_size, 5),
            neg: random_seq(rng, vocab_size, 5),
            label: rng.random_range(0.0..=1.0f32),
        })
        .collect()
}

/// A small tower in f64 with biases drawn away from zero.
pub fn random_tower(rng: &mut impl Rng, vocab_size: usize) -> TowerParams<f64> {
    let d = rng.random_range(1..=8);
    let h1 = rng.random_range(1..=16);
    let h2 = rng.random_range(1..=8);
    let layers = match rng.random_range(0..3) {
        0 => vec![1],
        1 => vec![h1, 1],
        _ => vec![h1, h2, 1],
    };
    let cfg = TowerConfig { embed_dim: d, layers, seed: rng.random() };
    let mut params = TowerParams::<f64>::init(&cfg, vocab_size).unwrap();
    for t in params.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    params
}

pub fn labels(batch: &[EncodedPair]) -> Vec<f64> {
    batch.iter().map(|p| p.label as f64).collect()
}

pub fn plain_loss(params: &TowerParams<f64>, batch: &[EncodedPair], bn: bool, bn_loss: BnLoss, margin: f64) -> f64 {
    let refs: Vec<&EncodedPair> = batch.iter().collect();
    let (orig, neg) = batch_logits(params, &refs, bn).unwrap();
    batch_loss(&orig, &labels(batch), &neg, bn_loss, margin).unwrap()
}

pub fn tape_grads(
    params: &TowerParams<f64>,
    batch: &[EncodedPair],
    bn: bool,
    bn_loss: BnLoss,
    margin: f64,
) -> (f64, Vec<Tensor<f64>>) {
    let refs: Vec<&EncodedPair> = batch.iter().collect();
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape).unwrap();
    let logits = batch_forward_with_negatives(&mut tape, &nodes, &refs, bn).unwrap();
    let loss = batch_loss_node(&mut tape, &logits, &labels(batch), bn_loss, margin).unwrap();
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss).unwrap();
    (value, nodes.ids().into_iter().map(|id| grads.take(id).unwrap()).collect())
}

/// Gradients this small are zero up to rounding (the final bias, for one,
/// cancels out of every pairwise logit), so relative error is measured
/// against at least this magnitude.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and central-difference gradients.
pub fn max_grad_error(
    params: &TowerParams<f64>,
    batch: &[EncodedPair],
    bn: bool,
    bn_loss: BnLoss,
    margin: f64,
    h: f64,
) -> f64 {
    let (_, analytic) = tape_grads(params, batch, bn, bn_loss, margin);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe.params_mut()[t].data()[i];
            probe.params_mut()[t].data_mut()[i] = orig + h;
            let up = plain_loss(&probe, batch, bn, bn_loss, margin);
            probe.params_mut()[t].data_mut()[i] = orig - h;
            let down = plain_loss(&probe, batch, bn, bn_loss, margin);
            probe.params_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR));
        }
    }
    worst
}

/// Smallest |pre-activation| of any hidden ReLU over every (query, title)
/// row the batch loss touches, and with the hinge also the smallest
/// |margin + x| over batch-negative logits. A central difference with step
/// `h` is only meaningful when no kink lies within reach of the step.
pub fn kink_distance(params: &TowerParams<f64>, batch: &[EncodedPair], bn: bool, bn_loss: BnLoss, margin: f64) -> f64 {
    let mut rows: Vec<(&TokenSeq, &TokenSeq)> = Vec::new();
    for (i, p) in batch.iter().enumerate() {
        rows.push((&p.query, &p.neg));
        for (j, other) in batch.iter().enumerate() {
            if i == j || bn {
                rows.push((&p.query, &other.pos));
            }
        }
    }
    let layers = &params.mlp.layers;
    let mut nearest = f64::INFINITY;
    for (q, t) in rows {
        let mut x = params.features(q, t).unwrap();
        for layer in &layers[..layers.len() - 1] {
            let (fan_in, fan_out) = (layer.weight.rows(), layer.weight.cols());
            let z: Vec<f64> = (0..fan_out)
                .map(|o| layer.bias.data()[o] + (0..fan_in).map(|k| x[k] * layer.weight.data()[k * fan_out + o]).sum::<f64>())
                .collect();
            nearest = z.iter().fold(nearest, |m, v| m.min(v.abs()));
            x = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    if bn && bn_loss == BnLoss::Hinge {
        for x in naive_bn_logits(params, batch) {
            nearest = nearest.min((margin + x).abs());
        }
    }
    nearest
}

/// Distance every kink keeps from the evaluation point in gradient checks.
pub const KINK_CLEARANCE: f64 = 0.02;

/// A random tower and batch whose loss is smooth within `KINK_CLEARANCE`.
pub fn smooth_case(
    rng: &mut impl Rng,
    vocab_size: usize,
    n: usize,
    bn: bool,
    bn_loss: BnLoss,
    margin: f64,
) -> (TowerParams<f64>, Vec<EncodedPair>) {
    loop {
        let params = random_tower(rng, vocab_size);
        let batch = random_batch(rng, vocab_size, n);
        if kink_distance(&params, &batch, bn, bn_loss, margin) >= KINK_CLEARANCE {
            return (params, batch);
        }
    }
}

/// Batch-negative logits by direct scoring: for each shift `k` in `1..n` and
/// row `i`, `H(q_i, pos_{(i-k) mod n}) - H(q_i, pos_i)`.
pub fn naive_bn_logits(params: &TowerParams<f64>, batch: &[EncodedPair]) -> Vec<f64> {
    let n = batch.len();
    let mut out = Vec::with_capacity(n * (n - 1));
    for k in 1..n {
        for i in 0..n {
            let j = (i + n - k) % n;
            let q = &batch[i].query;
            out.push(params.score(q, &batch[j].pos).unwrap() - params.score(q, &batch[i].pos).unwrap());
        }
    }
    out
}

pub fn naive_session_logits(params: &TowerParams<f64>, batch: &[EncodedPair]) -> Vec<f64> {
    batch
        .iter()
        .map(|p| params.score(&p.query, &p.pos).unwrap() - params.score(&p.query, &p.neg).unwrap())
        .collect()
}

/// A world and run small enough to push through every CLI command quickly.
pub const SMALL_RUN: &str = r#"{
  "seed": 5,
  "world": {"n_terms": 80, "n_items": 200, "n_queries": 40},
  "data": {"n_sessions": 600, "n_ratings": 400},
  "tower": {"embed_dim": 8, "layers": [16, 8, 1]},
  "train": {"steps": 40, "batch_size": 16, "eval_every": 20},
  "finetune": {"steps": 30, "batch_size": 16}
}"#;

pub fn relnn(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_relnn"))
        .args(args)
        .env_remove("RELNN_THREADS")
        .output()
        .expect("binary runs")
}

pub fn relnn_ok(args: &[&str]) -> std::process::Output {
    let out = relnn(args);
    assert!(
        out.status.success(),
        "relnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs gen → prepare → train → finetune under `root` and returns the
/// directories of each stage.
pub fn run_pipeline(root: &std::path::Path, config: &std::path::Path, extra: &[&str]) -> [std::path::PathBuf; 4] {
    let dirs = ["gen", "data", "train", "tuned"].map(|d| root.join(d));
    let s = |p: &std::path::Path| p.to_str().unwrap().to_owned();
    let cfg = s(config);
    let with = |mut args: Vec<String>| {
        args.extend(["--config".to_owned(), cfg.clone()]);
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        relnn_ok(&refs);
    };
    with(vec!["gen".into(), "--out".into(), s(&dirs[0])]);
    with(vec![
        "prepare".into(),
        "--sessions".into(),
        s(&dirs[0].join("sessions.jsonl")),
        "--ratings".into(),
        s(&dirs[0].join("ratings.jsonl")),
        "--out".into(),
        s(&dirs[1]),
    ]);
    with(vec!["train".into(), "--data".into(), s(&dirs[1]), "--out".into(), s(&dirs[2])]);
    with(vec![
        "finetune".into(),
        "--model".into(),
        s(&dirs[2].join("model.bin")),
        "--data".into(),
        s(&dirs[1]),
        "--out".into(),
        s(&dirs[3]),
    ]);
    dirs
}

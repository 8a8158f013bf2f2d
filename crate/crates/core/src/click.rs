//! Stage-1 training on click-derived session pairs.
//!
//! Each session pair contributes one pairwise logit `H(q, a) - H(q, b)` with
//! the click ratio of `a` as its soft label. When batch negatives are on,
//! every query in a mini-batch is also paired with the positive titles of the
//! other `n - 1` rows, giving `n(n-1)` extra logits labelled 0.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{self, NodeId, Optimizer, OptimizerConfig, Real, Tape, Tensor};
use crate::metrics;
use crate::text::{TokenSeq, Vocab};
use crate::tower::{TowerConfig, TowerNodes, TowerParams};
use crate::{Error, Result};

/// Two co-displayed titles under one query with their aggregated clicks.
///
/// Canonical order puts the more-clicked title in `title_a`; equal counts are
/// ordered by title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPair {
    pub query: String,
    pub title_a: String,
    pub title_b: String,
    pub clicks_a: u32,
    pub clicks_b: u32,
}

impl SessionPair {
    /// Validates the counts and returns the pair in canonical order.
    pub fn new(
        query: impl Into<String>,
        title_a: impl Into<String>,
        title_b: impl Into<String>,
        clicks_a: u32,
        clicks_b: u32,
    ) -> Result<Self> {
        let pair = SessionPair {
            query: query.into(),
            title_a: title_a.into(),
            title_b: title_b.into(),
            clicks_a,
            clicks_b,
        };
        pair.validated()
    }

    /// Rejects pairs without clicks; otherwise returns the canonical form.
    pub fn validated(self) -> Result<Self> {
        if self.clicks_a as u64 + self.clicks_b as u64 == 0 {
            return Err(Error::invalid(format!(
                "session pair for query {:?} has no clicks",
                self.query
            )));
        }
        Ok(self.canonical())
    }

    pub fn canonical(self) -> Self {
        if self.is_canonical() {
            self
        } else {
            SessionPair {
                query: self.query,
                title_a: self.title_b,
                title_b: self.title_a,
                clicks_a: self.clicks_b,
                clicks_b: self.clicks_a,
            }
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.clicks_a > self.clicks_b || (self.clicks_a == self.clicks_b && self.title_a <= self.title_b)
    }

    /// Click ratio of `title_a`.
    pub fn label(&self) -> f64 {
        session_label(self.clicks_a, self.clicks_b)
    }
}

/// `clicks_a / (clicks_a + clicks_b)`; callers guarantee at least one click.
pub fn session_label(clicks_a: u32, clicks_b: u32) -> f64 {
    clicks_a as f64 / (clicks_a as f64 + clicks_b as f64)
}

/// A session pair after encoding, ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub query: TokenSeq,
    pub pos: TokenSeq,
    pub neg: TokenSeq,
    pub label: f32,
}

pub fn encode_pairs(pairs: &[SessionPair], vocab: &Vocab) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            query: vocab.encode(&p.query),
            pos: vocab.encode(&p.title_a),
            neg: vocab.encode(&p.title_b),
            label: p.label() as f32,
        })
        .collect()
}

/// `H(q, a) - H(q, b)`.
pub fn pairwise_logit<T: Real>(params: &TowerParams<T>, query: &TokenSeq, a: &TokenSeq, b: &TokenSeq) -> Result<T> {
    let scores = params.score_batch(&[(query, a), (query, b)])?;
    Ok(scores[0] - scores[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnLoss {
    /// Logistic loss against label 0.
    Logloss,
    /// `max(0, margin + x)`.
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub bn_enabled: bool,
    pub bn_loss: BnLoss,
    pub margin: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Steps between history rows; 0 records only the first and last step.
    pub eval_every: usize,
    /// Cap on the number of held-out batches used for the batch-negative AUC.
    pub eval_bn_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            steps: 1000,
            bn_enabled: true,
            bn_loss: BnLoss::Logloss,
            margin: 1.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            eval_every: 100,
            eval_bn_batches: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.bn_enabled && self.batch_size < 2 {
            return Err(Error::invalid("batch negatives need a batch size of at least 2"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid("hinge margin must be positive"));
        }
        Ok(())
    }
}

/// Tape handles for one mini-batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchLogits {
    /// `[n, 1]` session-pair logits.
    pub original: NodeId,
    /// `[n(n-1), 1]` batch-negative logits, grouped by shift.
    pub negatives: Option<NodeId>,
}

/// Batched forward pass over `n` pairs.
///
/// Feature blocks `[Q, I+]`, `[Q, I-]` and, for each shift `k` in `1..n`,
/// `[Q, shift^k(I+)]` are stacked row-wise and pushed through the MLP once.
/// The output splits into `n + 1` blocks `P1..P{n+1}`: the session logits are
/// `P1 - P2` and the batch-negative logits are `P{k} - P1` for `k >= 3`.
///
/// The first layer is linear in each half of the concatenation, so it is
/// applied to `Q` and `I+` once and the shifted blocks reuse `I+·W`.
pub fn batch_forward_with_negatives<T: Real>(
    tape: &mut Tape<'_, T>,
    tower: &TowerNodes,
    batch: &[&EncodedPair],
    with_negatives: bool,
) -> Result<BatchLogits> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if with_negatives && n < 2 {
        return Err(Error::invalid("batch negatives need at least 2 pairs per batch"));
    }
    let queries: Vec<&TokenSeq> = batch.iter().map(|p| &p.query).collect();
    let pos: Vec<&TokenSeq> = batch.iter().map(|p| &p.pos).collect();
    let neg: Vec<&TokenSeq> = batch.iter().map(|p| &p.neg).collect();
    let q = tape.embed_bag(tower.embedding, &queries)?;
    let ip = tape.embed_bag(tower.embedding, &pos)?;
    let im = tape.embed_bag(tower.embedding, &neg)?;

    let (hq, halves) = tower.mlp.first_layer_halves(tape, q, &[ip, im])?;
    let (hp, hm) = (halves[0], halves[1]);
    let shifts = if with_negatives { n - 1 } else { 0 };
    let stacked = tape.shifted_sums(hq, hp, hm, shifts)?;
    let out = tower.mlp.forward_from_first(tape, stacked)?;

    let p1 = tape.slice_rows(out, 0, n)?;
    let p2 = tape.slice_rows(out, n, n)?;
    let original = tape.sub(p1, p2)?;
    let negatives = if with_negatives {
        let mut diffs = Vec::with_capacity(n - 1);
        for k in 2..=n {
            let pk = tape.slice_rows(out, k * n, n)?;
            diffs.push(tape.sub(pk, p1)?);
        }
        Some(tape.concat_rows(&diffs)?)
    } else {
        None
    };
    Ok(BatchLogits { original, negatives })
}

/// Session-pair and batch-negative logits of one batch as plain values.
pub fn batch_logits<T: Real>(
    params: &TowerParams<T>,
    batch: &[&EncodedPair],
    with_negatives: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape)?;
    let logits = batch_forward_with_negatives(&mut tape, &nodes, batch, with_negatives)?;
    let original = tape.value(logits.original).data().to_vec();
    let negatives = logits.negatives.map_or_else(Vec::new, |id| tape.value(id).data().to_vec());
    Ok((original, negatives))
}

/// Records `original loss + BN loss` on the tape, each component with weight 1.
pub fn batch_loss_node<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: &BatchLogits,
    labels: &[T],
    bn_loss: BnLoss,
    margin: T,
) -> Result<NodeId> {
    let original = tape.logloss_sum(logits.original, labels)?;
    let Some(neg) = logits.negatives else {
        return Ok(original);
    };
    let bn = match bn_loss {
        BnLoss::Logloss => {
            let zeros = vec![T::zero(); tape.value(neg).numel()];
            tape.logloss_sum(neg, &zeros)?
        }
        BnLoss::Hinge => tape.hinge_sum(neg, margin)?,
    };
    tape.add(original, bn)
}

/// Plain-value form of [`batch_loss_node`].
pub fn batch_loss(original: &[f64], labels: &[f64], negatives: &[f64], bn_loss: BnLoss, margin: f64) -> Result<f64> {
    if original.len() != labels.len() {
        return Err(Error::shape("batch_loss", format!("{} logits vs {} labels", original.len(), labels.len())));
    }
    let orig: f64 = original.iter().zip(labels).map(|(&x, &l)| grad::logloss(x, l)).sum();
    Ok(orig + negatives.iter().map(|&x| bn_term(x, bn_loss, margin)).sum::<f64>())
}

fn bn_term(x: f64, bn_loss: BnLoss, margin: f64) -> f64 {
    match bn_loss {
        BnLoss::Logloss => grad::logloss(x, 0.0),
        BnLoss::Hinge => grad::hinge_neg(x, margin),
    }
}

/// Diagnostics recorded during training, on held-out pairs unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// ROC-AUC of session-pair logits, scoring each pair in both orientations.
    pub orig_auc: Option<f64>,
    /// ROC-AUC separating batch-negative logits from their negations.
    pub bn_auc: Option<f64>,
    /// `bn_auc` on a fixed sample of training batches.
    pub train_bn_auc: Option<f64>,
    /// Mean logistic loss per session pair.
    pub orig_loss: f64,
    /// Mean batch-negative loss per term.
    pub bn_loss: Option<f64>,
}

/// Writes the training history as CSV; undefined values are left empty.
pub fn write_history_csv(rows: &[HistoryRow], out: &mut impl std::io::Write) -> std::io::Result<()> {
    fn opt(v: Option<f64>) -> String {
        v.map_or_else(String::new, |x| format!("{x:.6}"))
    }
    writeln!(out, "step,orig_auc,bn_auc,train_bn_auc,orig_loss,bn_loss")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{}",
            r.step,
            opt(r.orig_auc),
            opt(r.bn_auc),
            opt(r.train_bn_auc),
            r.orig_loss,
            opt(r.bn_loss)
        )?;
    }
    Ok(())
}

/// Evaluates session-pair and batch-negative metrics on `pairs`.
pub fn evaluate_click_model(
    params: &TowerParams<f32>,
    pairs: &[EncodedPair],
    config: &TrainConfig,
    step: usize,
) -> Result<HistoryRow> {
    let mut logits = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(1024) {
        let rows: Vec<(&TokenSeq, &TokenSeq)> = chunk
            .iter()
            .flat_map(|p| [(&p.query, &p.pos), (&p.query, &p.neg)])
            .collect();
        let scores = params.score_batch(&rows)?;
        logits.extend(scores.chunks(2).map(|s| (s[0] - s[1]) as f64));
    }
    let orig_loss = if pairs.is_empty() {
        0.0
    } else {
        logits.iter().zip(pairs).map(|(&x, p)| grad::logloss(x, p.label as f64)).sum::<f64>() / pairs.len() as f64
    };
    let decisive: Vec<f64> = logits
        .iter()
        .zip(pairs)
        .filter(|(_, p)| p.label > 0.5)
        .map(|(&x, _)| x)
        .collect();
    let orig_auc = metrics::symmetric_auc(&decisive);

    let (bn_auc, bn_loss) = batch_negative_metrics(params, pairs, config)?;
    Ok(HistoryRow { step, orig_auc, bn_auc, train_bn_auc: None, orig_loss, bn_loss })
}

/// AUC and mean loss of batch-negative logits over up to
/// `eval_bn_batches` batches of `pairs` in a fixed shuffled order.
pub fn batch_negative_metrics(
    params: &TowerParams<f32>,
    pairs: &[EncodedPair],
    config: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let n = config.batch_size.min(pairs.len());
    if !config.bn_enabled || n < 2 {
        return Ok((None, None));
    }
    let mut order: Vec<&EncodedPair> = pairs.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
    let mut negatives = Vec::new();
    for batch in order.chunks_exact(n).take(config.eval_bn_batches.max(1)) {
        let (_, neg) = batch_logits(params, batch, true)?;
        negatives.extend(neg.into_iter().map(f64::from));
    }
    if negatives.is_empty() {
        return Ok((None, None));
    }
    let flipped: Vec<f64> = negatives.iter().map(|&x| -x).collect();
    let total: f64 = negatives.iter().map(|&x| bn_term(x, config.bn_loss, config.margin)).sum();
    Ok((metrics::symmetric_auc(&flipped), Some(total / negatives.len() as f64)))
}

/// Trains a tower on session pairs with Adam (or SGD) over globally shuffled
/// mini-batches. History rows are computed on `eval` when it is non-empty and
/// on the training pairs otherwise.
pub fn train_click_model(
    train: &[SessionPair],
    eval: &[SessionPair],
    vocab: &Vocab,
    tower: &TowerConfig,
    config: &TrainConfig,
) -> Result<(TowerParams<f32>, Vec<HistoryRow>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    let encoded = encode_pairs(train, vocab);
    let eval_set = if eval.is_empty() { encoded.clone() } else { encode_pairs(eval, vocab) };
    let batch_size = config.batch_size.min(encoded.len());
    if config.bn_enabled && batch_size < 2 {
        return Err(Error::invalid("batch negatives need at least 2 training pairs"));
    }

    let mut params = TowerParams::<f32>::init(tower, vocab.len())?;
    let mut optimizer = Optimizer::new(&config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut cursor = encoded.len();
    let margin = config.margin as f32;
    let record = |params: &TowerParams<f32>, step: usize| -> Result<HistoryRow> {
        let mut row = evaluate_click_model(params, &eval_set, config, step)?;
        row.train_bn_auc = batch_negative_metrics(params, &encoded, config)?.0;
        Ok(row)
    };
    let mut history = vec![record(&params, 0)?];

    for step in 1..=config.steps {
        // Short tail batches are dropped when batch negatives are on.
        let exhausted = if config.bn_enabled { cursor + batch_size > order.len() } else { cursor >= order.len() };
        if exhausted {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(order.len());
        let batch: Vec<&EncodedPair> = order[cursor..end].iter().map(|&i| &encoded[i]).collect();
        cursor = end;

        let grads: Vec<Tensor<f32>> = {
            let mut tape = Tape::new();
            let nodes = params.bind(&mut tape)?;
            let logits = batch_forward_with_negatives(&mut tape, &nodes, &batch, config.bn_enabled)?;
            let labels: Vec<f32> = batch.iter().map(|p| p.label).collect();
            let loss = batch_loss_node(&mut tape, &logits, &labels, config.bn_loss, margin)?;
            let mut grads = tape.backward(loss)?;
            nodes
                .ids()
                .into_iter()
                .map(|id| grads.take(id).expect("parameter gradient"))
                .collect()
        };
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        optimizer.step(&mut params.params_mut(), &grad_refs)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("optimizer step"));
        }

        let due = config.eval_every > 0 && step % config.eval_every == 0;
        if due || step == config.steps {
            history.push(record(&params, step)?);
        }
    }
    Ok((params, history))
}

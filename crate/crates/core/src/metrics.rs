//! Ranking and classification metrics.
//!
//! Every metric returns `None` when it is undefined on its input (a single
//! class for AUC, no eligible pairs, no query with a positive, ...).
//!
//! Tie handling: ROC-AUC gives half credit to tied positive/negative scores,
//! average precision ranks tied scores in input order, and pair accuracy
//! gives half credit to a zero logit.

use serde::{Deserialize, Serialize};

/// NDCG cutoff reported in [`MetricsReport`].
pub const NDCG_K: usize = 10;
/// Precision cutoff reported in [`MetricsReport`].
pub const PRECISION_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Pos,
    Neg,
}

/// `P(s+ > s-) + 0.5 P(s+ = s-)` over all positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann-Whitney count, so ties stay integral.
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        doubled += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Some(doubled as f64 / (2 * positives * negatives) as f64)
}

/// ROC-AUC of pairwise logits that should all be positive, scoring each one
/// in both orientations: `x` labelled 1 and `-x` labelled 0.
pub fn symmetric_auc(logits: &[f64]) -> Option<f64> {
    if logits.is_empty() {
        return None;
    }
    let scores: Vec<f64> = logits.iter().copied().chain(logits.iter().map(|&x| -x)).collect();
    let labels: Vec<bool> = (0..scores.len()).map(|i| i < logits.len()).collect();
    roc_auc(&scores, &labels)
}

/// Fraction of pair logits above zero, for pairs whose preferred item is
/// listed first; a zero logit earns half credit.
pub fn pair_accuracy(logits: &[f64]) -> Option<f64> {
    if logits.is_empty() {
        return None;
    }
    let credit: f64 = logits
        .iter()
        .map(|&x| {
            if x > 0.0 {
                1.0
            } else if x == 0.0 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Some(credit / logits.len() as f64)
}

/// Average precision of the requested class. `Neg` flips the labels and
/// negates the scores first.
pub fn pr_auc(scores: &[f64], labels: &[bool], polarity: Polarity) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (scores, labels): (Vec<f64>, Vec<bool>) = match polarity {
        Polarity::Pos => (scores.to_vec(), labels.to_vec()),
        Polarity::Neg => (scores.iter().map(|&s| -s).collect(), labels.iter().map(|&l| !l).collect()),
    };
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable: ties keep input order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn dcg(grades: &[u32], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &g)| (2f64.powi(g as i32) - 1.0) / ((r + 2) as f64).log2())
        .sum()
}

/// Mean NDCG@k over queries; `ranked[i]` holds query i's grades in ranked
/// order. Queries with zero ideal DCG are skipped.
pub fn ndcg_at_k(ranked: &[Vec<u32>], k: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for grades in ranked {
        let mut ideal = grades.clone();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(&ideal, k);
        if idcg > 0.0 {
            total += dcg(grades, k) / idcg;
            counted += 1;
        }
    }
    (counted > 0).then(|| total / counted as f64)
}

/// Average precision of one ranked binary list, or `None` without positives.
pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// `(MAP, P@k)` over queries. MAP averages queries with at least one
/// positive; P@k averages non-empty queries, dividing by `min(k, len)`.
pub fn map_and_prec_at_k(ranked: &[Vec<bool>], k: usize) -> (Option<f64>, Option<f64>) {
    let aps: Vec<f64> = ranked.iter().filter_map(|r| average_precision(r)).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);

    let precisions: Vec<f64> = ranked
        .iter()
        .filter(|r| !r.is_empty() && k > 0)
        .map(|r| {
            let depth = k.min(r.len());
            r[..depth].iter().filter(|&&x| x).count() as f64 / depth as f64
        })
        .collect();
    let prec = (!precisions.is_empty()).then(|| precisions.iter().sum::<f64>() / precisions.len() as f64);
    (map, prec)
}

/// The seven evaluation metrics of one model on one dataset. Undefined values
/// serialize as JSON `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub roc_auc: Option<f64>,
    pub pair_accuracy: Option<f64>,
    pub pr_auc_pos: Option<f64>,
    pub pr_auc_neg: Option<f64>,
    pub ndcg_at_10: Option<f64>,
    pub mean_avg_prec: Option<f64>,
    pub prec_at_3: Option<f64>,
}

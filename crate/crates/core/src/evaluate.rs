//! Model evaluation on rated examples and session pairs, and the
//! matched-versus-unrelated query case study.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::click::SessionPair;
use crate::finetune::{discordant_pairs, ModelBundle, RatingExample};
use crate::metrics::{self, MetricsReport, Polarity, NDCG_K, PRECISION_K};
use crate::Result;

/// All seven metrics on graded examples. Pair accuracy uses same-query
/// pairs with different grades; the ranking metrics rank each query's
/// examples by score, ties in input order.
pub fn evaluate_ratings(bundle: &ModelBundle, examples: &[RatingExample]) -> Result<MetricsReport> {
    let pairs: Vec<(&str, &str)> = examples.iter().map(|e| (e.query.as_str(), e.title.as_str())).collect();
    let scores: Vec<f64> = bundle.score_batch(&pairs)?.into_iter().map(f64::from).collect();
    Ok(ratings_report(examples, &scores))
}

pub fn ratings_report(examples: &[RatingExample], scores: &[f64]) -> MetricsReport {
    assert_eq!(examples.len(), scores.len(), "one score per example");
    let labels: Vec<bool> = examples.iter().map(|e| e.grade.is_relevant()).collect();
    let logits: Vec<f64> = discordant_pairs(examples).iter().map(|&(hi, lo)| scores[hi] - scores[lo]).collect();

    let mut by_query: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_query.entry(e.query.as_str()).or_default().push(i);
    }
    let mut graded = Vec::with_capacity(by_query.len());
    let mut binary = Vec::with_capacity(by_query.len());
    for mut idx in by_query.into_values() {
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        graded.push(idx.iter().map(|&i| examples[i].grade.value()).collect::<Vec<_>>());
        binary.push(idx.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    }
    let (mean_avg_prec, prec_at_3) = metrics::map_and_prec_at_k(&binary, PRECISION_K);

    MetricsReport {
        roc_auc: metrics::roc_auc(scores, &labels),
        pair_accuracy: metrics::pair_accuracy(&logits),
        pr_auc_pos: metrics::pr_auc(scores, &labels, Polarity::Pos),
        pr_auc_neg: metrics::pr_auc(scores, &labels, Polarity::Neg),
        ndcg_at_10: metrics::ndcg_at_k(&graded, NDCG_K),
        mean_avg_prec,
        prec_at_3,
    }
}

/// Pairwise logits `score(q, a) − score(q, b)` of session pairs with a
/// strict click preference.
pub fn session_pair_logits(bundle: &ModelBundle, pairs: &[SessionPair]) -> Result<Vec<f64>> {
    let strict: Vec<&SessionPair> = pairs.iter().filter(|p| p.label() > 0.5).collect();
    let mut inputs = Vec::with_capacity(2 * strict.len());
    for p in &strict {
        inputs.push((p.query.as_str(), p.title_a.as_str()));
        inputs.push((p.query.as_str(), p.title_b.as_str()));
    }
    let scores = bundle.score_batch(&inputs)?;
    Ok(scores.chunks_exact(2).map(|s| f64::from(s[0]) - f64::from(s[1])).collect())
}

/// Session pairs carry no absolute labels, so only ROC-AUC (both
/// orientations of each pair) and pair accuracy are filled in.
pub fn evaluate_session_pairs(bundle: &ModelBundle, pairs: &[SessionPair]) -> Result<MetricsReport> {
    let logits = session_pair_logits(bundle, pairs)?;
    Ok(MetricsReport {
        roc_auc: metrics::symmetric_auc(&logits),
        pair_accuracy: metrics::pair_accuracy(&logits),
        ..Default::default()
    })
}

/// Items scored under the query they belong to and under an unrelated one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyInput {
    pub matched_query: String,
    pub other_query: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub query: String,
    pub scores: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub matched: QueryScores,
    pub other: QueryScores,
    /// Mean matched score minus mean unrelated score.
    pub gap: f64,
    pub baseline_gap: Option<f64>,
    /// `gap / baseline_gap`, present when a baseline model is compared.
    pub separation_ratio: Option<f64>,
}

fn query_scores(bundle: &ModelBundle, query: &str, items: &[String]) -> Result<QueryScores> {
    let inputs: Vec<(&str, &str)> = items.iter().map(|t| (query, t.as_str())).collect();
    let scores: Vec<f64> = bundle.score_batch(&inputs)?.into_iter().map(f64::from).collect();
    let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(QueryScores {
        query: query.to_owned(),
        min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        scores,
    })
}

fn gap(bundle: &ModelBundle, input: &CaseStudyInput) -> Result<(QueryScores, QueryScores, f64)> {
    let matched = query_scores(bundle, &input.matched_query, &input.items)?;
    let other = query_scores(bundle, &input.other_query, &input.items)?;
    let gap = matched.mean - other.mean;
    Ok((matched, other, gap))
}

/// Ratio of two score gaps; two zero gaps count as equal separation.
pub fn separation_ratio(gap: f64, baseline_gap: f64) -> f64 {
    if gap == 0.0 && baseline_gap == 0.0 {
        1.0
    } else {
        gap / baseline_gap
    }
}

pub fn case_study(bundle: &ModelBundle, baseline: Option<&ModelBundle>, input: &CaseStudyInput) -> Result<CaseStudyReport> {
    let (matched, other, g) = gap(bundle, input)?;
    let baseline_gap = baseline.map(|b| gap(b, input).map(|r| r.2)).transpose()?;
    Ok(CaseStudyReport {
        matched,
        other,
        gap: g,
        baseline_gap,
        separation_ratio: baseline_gap.map(|b| separation_ratio(g, b)),
    })
}

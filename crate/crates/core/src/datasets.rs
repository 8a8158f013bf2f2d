//! Click-log and ratings pipelines.
//!
//! Raw sessions become 5-tuples `(query, item_a, item_b, clicks_a, clicks_b)`
//! for every co-displayed pair with at least one click. Tuples are summed per
//! query and unordered item pair over a day window, pruned to the most
//! clicked pairs per query, and split into train/eval sets by query.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::click::SessionPair;
use crate::{Error, Result};

pub const DEFAULT_WINDOW_DAYS: u32 = 180;
pub const DEFAULT_TOP_K: usize = 100;
pub const CLICK_SPLIT: [f64; 2] = [0.9, 0.1];
pub const RATING_SPLIT: [f64; 3] = [0.65, 0.30, 0.05];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub id: String,
    pub title: String,
    pub position: u32,
    pub clicked: bool,
}

/// One search session: a query and its displayed items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub query: String,
    pub day: u32,
    pub items: Vec<SessionItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiveTuple {
    pub query: String,
    pub item_a: ItemRef,
    pub item_b: ItemRef,
    pub click_cnt_a: u64,
    pub click_cnt_b: u64,
}

impl FiveTuple {
    /// More-clicked item first; ties ordered by title, then id.
    pub fn canonical(self) -> Self {
        let keep = self.click_cnt_a > self.click_cnt_b
            || (self.click_cnt_a == self.click_cnt_b
                && (&self.item_a.title, &self.item_a.id) <= (&self.item_b.title, &self.item_b.id));
        if keep {
            self
        } else {
            FiveTuple {
                query: self.query,
                item_a: self.item_b,
                item_b: self.item_a,
                click_cnt_a: self.click_cnt_b,
                click_cnt_b: self.click_cnt_a,
            }
        }
    }

    pub fn click_sum(&self) -> u64 {
        self.click_cnt_a + self.click_cnt_b
    }

    /// `None` when neither item was clicked.
    pub fn to_session_pair(&self) -> Option<SessionPair> {
        let clamp = |c: u64| u32::try_from(c).unwrap_or(u32::MAX);
        SessionPair::new(
            self.query.clone(),
            self.item_a.title.clone(),
            self.item_b.title.clone(),
            clamp(self.click_cnt_a),
            clamp(self.click_cnt_b),
        )
        .ok()
    }
}

/// One tuple per displayed pair `(upper, lower)` where either item was
/// clicked; the counts are the two click flags.
pub fn sessions_to_tuples(record: &SessionRecord) -> Vec<FiveTuple> {
    let mut items: Vec<&SessionItem> = record.items.iter().collect();
    items.sort_by_key(|it| it.position);
    let mut out = Vec::new();
    for (i, upper) in items.iter().enumerate() {
        for lower in &items[i + 1..] {
            if upper.id == lower.id || !(upper.clicked || lower.clicked) {
                continue;
            }
            out.push(FiveTuple {
                query: record.query.clone(),
                item_a: ItemRef { id: upper.id.clone(), title: upper.title.clone() },
                item_b: ItemRef { id: lower.id.clone(), title: lower.title.clone() },
                click_cnt_a: u64::from(upper.clicked),
                click_cnt_b: u64::from(lower.clicked),
            });
        }
    }
    out
}

/// Day range kept by [`aggregate_tuples`]: the `days` days ending at
/// `end_day` inclusive, or at the latest day seen when `end_day` is unset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationWindow {
    pub days: u32,
    pub end_day: Option<u32>,
}

impl Default for AggregationWindow {
    fn default() -> Self {
        AggregationWindow { days: DEFAULT_WINDOW_DAYS, end_day: None }
    }
}

/// Sums click counts per query and unordered item pair over the window, then
/// canonicalizes each result. Output is sorted by query and item ids, so it
/// does not depend on input order.
pub fn aggregate_tuples<I>(tuples: I, window: AggregationWindow) -> Vec<FiveTuple>
where
    I: IntoIterator<Item = (u32, FiveTuple)>,
{
    let tuples: Vec<(u32, FiveTuple)> = tuples.into_iter().collect();
    let Some(end) = window.end_day.or_else(|| tuples.iter().map(|(d, _)| *d).max()) else {
        return Vec::new();
    };
    let mut groups: BTreeMap<(String, ItemRef, ItemRef), (u64, u64)> = BTreeMap::new();
    for (day, t) in tuples {
        if day > end || u64::from(day) + u64::from(window.days) <= u64::from(end) {
            continue;
        }
        let (lo, hi, lo_cnt, hi_cnt) = if t.item_a <= t.item_b {
            (t.item_a, t.item_b, t.click_cnt_a, t.click_cnt_b)
        } else {
            (t.item_b, t.item_a, t.click_cnt_b, t.click_cnt_a)
        };
        let entry = groups.entry((t.query, lo, hi)).or_insert((0, 0));
        entry.0 += lo_cnt;
        entry.1 += hi_cnt;
    }
    groups
        .into_iter()
        .map(|((query, a, b), (ca, cb))| {
            FiveTuple { query, item_a: a, item_b: b, click_cnt_a: ca, click_cnt_b: cb }.canonical()
        })
        .collect()
}

/// Keeps at most `k` tuples per query with the largest click sums; ties
/// prefer the smaller `(title_a, title_b)`.
pub fn retain_top_k(tuples: Vec<FiveTuple>, k: usize) -> Vec<FiveTuple> {
    let mut by_query: BTreeMap<String, Vec<FiveTuple>> = BTreeMap::new();
    for t in tuples {
        by_query.entry(t.query.clone()).or_default().push(t);
    }
    let mut out = Vec::new();
    for (_, mut group) in by_query {
        group.sort_by(|x, y| {
            y.click_sum()
                .cmp(&x.click_sum())
                .then_with(|| (&x.item_a.title, &x.item_b.title).cmp(&(&y.item_a.title, &y.item_b.title)))
                .then_with(|| (&x.item_a.id, &x.item_b.id).cmp(&(&y.item_a.id, &y.item_b.id)))
        });
        group.truncate(k);
        out.extend(group);
    }
    out
}

/// Sessions → windowed aggregation → top-k per query → session pairs.
pub fn session_pairs_from_logs(records: &[SessionRecord], window: AggregationWindow, top_k: usize) -> Vec<SessionPair> {
    let dated = records.iter().flat_map(|r| sessions_to_tuples(r).into_iter().map(move |t| (r.day, t)));
    let aggregated = aggregate_tuples(dated, window);
    retain_top_k(aggregated, top_k).iter().filter_map(FiveTuple::to_session_pair).collect()
}

/// Uniform value in `[0, 1)` derived from the query text and seed.
pub fn query_bucket(query: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query.as_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns every query (and thus all of its examples) to one split, with
/// split probabilities given by `fractions`.
pub fn split_by_query<T, F>(examples: Vec<T>, fractions: &[f64], seed: u64, query_of: F) -> Result<Vec<Vec<T>>>
where
    F: Fn(&T) -> &str,
{
    if fractions.is_empty() || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::invalid(format!("bad split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, not 1")));
    }
    let mut splits: Vec<Vec<T>> = fractions.iter().map(|_| Vec::new()).collect();
    for ex in examples {
        let u = query_bucket(query_of(&ex), seed);
        let mut acc = 0.0;
        let mut slot = fractions.len() - 1;
        for (i, f) in fractions.iter().enumerate() {
            acc += f;
            if u < acc {
                slot = i;
                break;
            }
        }
        splits[slot].push(ex);
    }
    Ok(splits)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|source| Error::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads session pairs, rejecting click-less ones and canonicalizing order.
pub fn read_session_pairs(path: impl AsRef<Path>) -> Result<Vec<SessionPair>> {
    read_jsonl::<SessionPair>(path)?.into_iter().map(SessionPair::validated).collect()
}

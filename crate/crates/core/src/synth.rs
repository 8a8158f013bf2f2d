//! Synthetic e-commerce world with a known relevance oracle.
//!
//! Titles are bags of canonical terms `w0001…`. Some terms have an alias
//! `sNNNN` that only ever appears in queries, so a model can connect the two
//! only through what its embeddings learn from clicks. Clicks depend on
//! relevance and on a per-item attractiveness, which confounds the signal.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{SessionItem, SessionRecord};
use crate::finetune::{Grade, RatingExample};
use crate::grad::sigmoid;
use crate::text::tokenize;
use crate::{Error, Result};

pub const MIN_TERMS: usize = 50;
pub const MIN_ITEMS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_terms: usize,
    pub n_items: usize,
    pub n_queries: usize,
    pub alias_prob: f64,
    pub query_alias_prob: f64,
    pub title_len: (usize, usize),
    pub query_len: (usize, usize),
    pub alpha_sigma: f64,
    /// Click logit is `rel_scale·(r − rel_center) + attract_scale·ln α`.
    pub rel_scale: f64,
    pub rel_center: f64,
    pub attract_scale: f64,
    /// Share of displayed (or rated) items drawn from the query's r > 0 set.
    pub relevant_frac: f64,
    pub slate_size: usize,
    pub days: u32,
    pub rating_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_terms: 2000,
            n_items: 5000,
            n_queries: 1000,
            alias_prob: 0.3,
            query_alias_prob: 0.5,
            title_len: (3, 8),
            query_len: (1, 3),
            alpha_sigma: 0.5,
            rel_scale: 2.5,
            rel_center: 0.4,
            attract_scale: 0.8,
            relevant_frac: 0.7,
            slate_size: 10,
            days: 180,
            rating_noise: 0.05,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_terms < MIN_TERMS {
            return Err(Error::invalid(format!("n_terms {} is below {MIN_TERMS}", self.n_terms)));
        }
        if self.n_items < MIN_ITEMS {
            return Err(Error::invalid(format!("n_items {} is below {MIN_ITEMS}", self.n_items)));
        }
        if self.n_queries == 0 || self.slate_size == 0 || self.days == 0 {
            return Err(Error::invalid("n_queries, slate_size and days must be positive"));
        }
        let (lo, hi) = self.title_len;
        if lo == 0 || lo > hi || hi > self.n_terms {
            return Err(Error::invalid(format!("bad title_len {:?}", self.title_len)));
        }
        let (qlo, qhi) = self.query_len;
        if qlo == 0 || qlo > qhi {
            return Err(Error::invalid(format!("bad query_len {:?}", self.query_len)));
        }
        for (name, p) in [
            ("alias_prob", self.alias_prob),
            ("query_alias_prob", self.query_alias_prob),
            ("relevant_frac", self.relevant_frac),
            ("rating_noise", self.rating_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} {p} is not a probability")));
            }
        }
        if !(self.alpha_sigma >= 0.0 && self.alpha_sigma.is_finite()) {
            return Err(Error::invalid("alpha_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthItem {
    pub id: String,
    pub title: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub terms: Vec<String>,
    /// alias → canonical term
    pub aliases: BTreeMap<String, String>,
    pub items: Vec<SynthItem>,
    pub queries: Vec<String>,
}

fn numbered(prefix: char, i: usize, total: usize) -> String {
    let width = total.to_string().len().max(4);
    format!("{prefix}{:0width$}", i + 1)
}

/// Builds a world from its config. Each query is 1–3 distinct terms of some
/// item's title, so every query has at least one item with r = 1.
pub fn gen_world(config: &WorldConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let terms: Vec<String> = (0..config.n_terms).map(|i| numbered('w', i, config.n_terms)).collect();
    let mut alias_of: Vec<Option<String>> = vec![None; config.n_terms];
    let mut aliases = BTreeMap::new();
    for (i, term) in terms.iter().enumerate() {
        if rng.random_bool(config.alias_prob) {
            let alias = numbered('s', i, config.n_terms);
            aliases.insert(alias.clone(), term.clone());
            alias_of[i] = Some(alias);
        }
    }

    let alpha_dist = LogNormal::new(0.0, config.alpha_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut title_terms: Vec<Vec<usize>> = Vec::with_capacity(config.n_items);
    let mut items = Vec::with_capacity(config.n_items);
    for i in 0..config.n_items {
        let len = rng.random_range(config.title_len.0..=config.title_len.1);
        let idx = sample(&mut rng, config.n_terms, len).into_vec();
        let title = idx.iter().map(|&t| terms[t].as_str()).collect::<Vec<_>>().join(" ");
        items.push(SynthItem { id: numbered('i', i, config.n_items), title, alpha: alpha_dist.sample(&mut rng) });
        title_terms.push(idx);
    }

    let mut queries = Vec::with_capacity(config.n_queries);
    for _ in 0..config.n_queries {
        let source = &title_terms[rng.random_range(0..config.n_items)];
        let want = rng.random_range(config.query_len.0..=config.query_len.1).min(source.len());
        let picked = sample(&mut rng, source.len(), want).into_vec();
        let words: Vec<&str> = picked
            .iter()
            .map(|&p| {
                let t = source[p];
                match &alias_of[t] {
                    Some(alias) if rng.random_bool(config.query_alias_prob) => alias.as_str(),
                    _ => terms[t].as_str(),
                }
            })
            .collect();
        queries.push(words.join(" "));
    }

    Ok(SynthWorld { config: config.clone(), terms, aliases, items, queries })
}

impl SynthWorld {
    /// Distinct canonical terms of a query.
    pub fn canonical_terms(&self, query: &str) -> BTreeSet<String> {
        tokenize(query)
            .into_iter()
            .map(|t| self.aliases.get(&t).cloned().unwrap_or(t))
            .collect()
    }

    /// Indices of items sharing at least one canonical term with the query.
    pub fn relevant_items(&self, query: &str) -> Vec<usize> {
        let wanted = self.canonical_terms(query);
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.title.split(' ').any(|t| wanted.contains(t)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn click_probability(&self, relevance: f64, alpha: f64) -> f64 {
        let c = &self.config;
        sigmoid(c.rel_scale * (relevance - c.rel_center) + c.attract_scale * alpha.ln())
    }

    fn relevant_index(&self) -> Vec<Vec<usize>> {
        let mut by_term: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.items.iter().enumerate() {
            for t in it.title.split(' ') {
                by_term.entry(t).or_default().push(i);
            }
        }
        self.queries
            .iter()
            .map(|q| {
                let mut hits: Vec<usize> = self
                    .canonical_terms(q)
                    .iter()
                    .flat_map(|t| by_term.get(t.as_str()).into_iter().flatten().copied())
                    .collect();
                hits.sort_unstable();
                hits.dedup();
                hits
            })
            .collect()
    }

    fn pick_item(&self, rng: &mut ChaCha8Rng, relevant: &[usize]) -> usize {
        if !relevant.is_empty() && rng.random_bool(self.config.relevant_frac) {
            relevant[rng.random_range(0..relevant.len())]
        } else {
            rng.random_range(0..self.items.len())
        }
    }
}

/// `|canonical(query) ∩ title terms| / |canonical(query)|`, or 0 for an
/// empty query.
pub fn oracle_relevance(query: &str, title: &str, world: &SynthWorld) -> f64 {
    let wanted = world.canonical_terms(query);
    if wanted.is_empty() {
        return 0.0;
    }
    let title: BTreeSet<String> = tokenize(title).into_iter().collect();
    wanted.intersection(&title).count() as f64 / wanted.len() as f64
}

/// Sessions with `slate_size` distinct items each; every item is clicked
/// independently with the world's click probability.
pub fn simulate_sessions(world: &SynthWorld, n_sessions: usize, seed: u64) -> Vec<SessionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = world.relevant_index();
    let slate = world.config.slate_size.min(world.items.len());
    let mut out = Vec::with_capacity(n_sessions);
    for _ in 0..n_sessions {
        let qi = rng.random_range(0..world.queries.len());
        let query = &world.queries[qi];
        let day = rng.random_range(0..world.config.days);
        let mut chosen: Vec<usize> = Vec::with_capacity(slate);
        while chosen.len() < slate {
            let it = world.pick_item(&mut rng, &index[qi]);
            if !chosen.contains(&it) {
                chosen.push(it);
            }
        }
        let items = chosen
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let item = &world.items[i];
                let r = oracle_relevance(query, &item.title, world);
                SessionItem {
                    id: item.id.clone(),
                    title: item.title.clone(),
                    position: pos as u32 + 1,
                    clicked: rng.random_bool(world.click_probability(r, item.alpha)),
                }
            })
            .collect();
        out.push(SessionRecord { query: query.clone(), day, items });
    }
    out
}

/// Grade bins of width 0.2 on the oracle relevance, top bin closed.
pub fn grade_for_relevance(r: f64) -> Grade {
    match r {
        r if r < 0.2 => Grade::Bad,
        r if r < 0.4 => Grade::Fair,
        r if r < 0.6 => Grade::Good,
        r if r < 0.8 => Grade::Excellent,
        _ => Grade::Perfect,
    }
}

/// Rated (query, title) pairs mixing relevant and random items. With
/// `noise`, a `rating_noise` share of grades is redrawn uniformly.
pub fn gen_ratings(world: &SynthWorld, n: usize, seed: u64, noise: bool) -> Vec<RatingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = world.relevant_index();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let qi = rng.random_range(0..world.queries.len());
        let item = &world.items[world.pick_item(&mut rng, &index[qi])];
        let query = &world.queries[qi];
        let mut grade = grade_for_relevance(oracle_relevance(query, &item.title, world));
        if noise && rng.random_bool(world.config.rating_noise) {
            grade = Grade::ALL[rng.random_range(0..Grade::ALL.len())];
        }
        out.push(RatingExample { query: query.clone(), title: item.title.clone(), grade });
    }
    out
}

//! In-memory form of the `gen` and `prepare` stages.

use crate::click::SessionPair;
use crate::config::RunConfig;
use crate::datasets::{session_pairs_from_logs, split_by_query, AggregationWindow, SessionRecord};
use crate::finetune::RatingExample;
use crate::synth::{gen_ratings, gen_world, simulate_sessions, SynthWorld};
use crate::text::Vocab;
use crate::Result;

#[derive(Debug, Clone)]
pub struct Generated {
    pub world: SynthWorld,
    pub sessions: Vec<SessionRecord>,
    pub ratings: Vec<RatingExample>,
}

pub fn generate(cfg: &RunConfig) -> Result<Generated> {
    let mut world_cfg = cfg.world.clone();
    if !cfg.data.rating_noise {
        world_cfg.rating_noise = 0.0;
    }
    let world = gen_world(&world_cfg)?;
    let sessions = simulate_sessions(&world, cfg.data.n_sessions, cfg.session_seed());
    let ratings = gen_ratings(&world, cfg.data.n_ratings, cfg.rating_seed(), cfg.data.rating_noise);
    Ok(Generated { world, sessions, ratings })
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub pairs_train: Vec<SessionPair>,
    pub pairs_eval: Vec<SessionPair>,
    /// Train, validation and test ratings; empty when no ratings were given.
    pub ratings: Vec<Vec<RatingExample>>,
    /// Built from the training pairs and training ratings only.
    pub vocab: Vocab,
}

/// Aggregates session logs into pairs and splits pairs and ratings by query.
pub fn prepare(cfg: &RunConfig, records: &[SessionRecord], ratings: Vec<RatingExample>) -> Result<Prepared> {
    let window = AggregationWindow { days: cfg.data.window_days, end_day: None };
    let pairs = session_pairs_from_logs(records, window, cfg.data.top_k);
    let mut splits = split_by_query(pairs, &cfg.data.click_split, cfg.seed, |p| p.query.as_str())?.into_iter();
    let pairs_train = splits.next().unwrap_or_default();
    let pairs_eval = splits.next().unwrap_or_default();
    let ratings = if ratings.is_empty() {
        Vec::new()
    } else {
        split_by_query(ratings, &cfg.data.rating_split, cfg.rating_seed(), |e| e.query.as_str())?
    };

    let mut texts: Vec<&str> = pairs_train.iter().flat_map(|p| [p.query.as_str(), &p.title_a, &p.title_b]).collect();
    if let Some(train) = ratings.first() {
        texts.extend(train.iter().flat_map(|e| [e.query.as_str(), &e.title]));
    }
    let vocab = Vocab::build(&texts, cfg.vocab.max_size, cfg.vocab.min_count)?;
    Ok(Prepared { pairs_train, pairs_eval, ratings, vocab })
}

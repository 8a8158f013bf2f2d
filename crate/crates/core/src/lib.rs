//! Neural relevance scoring for (query, item title) pairs.
//!
//! Training runs in two stages. A Siamese pairwise tower is first trained on
//! click-derived session pairs, with every mini-batch augmented by in-batch
//! random negatives. The tower is then fine-tuned point-wise on graded human
//! ratings through an additive ensemble head.
//!
//! The crate also carries the click-log pipeline that produces session pairs,
//! the ranking metrics used for evaluation, a synthetic world with a known
//! relevance oracle, and a binary model container.

pub mod cli;
pub mod click;
pub mod config;
pub mod datasets;
mod error;
pub mod evaluate;
pub mod finetune;
pub mod grad;
pub mod metrics;
pub mod model_io;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod tower;

pub use error::{Error, Result};
pub use finetune::{Grade, ModelBundle, RatingExample, ScoringMode};
pub use text::{TokenSeq, Vocab};
pub use tower::{TowerConfig, TowerParams};

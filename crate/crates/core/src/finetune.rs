//! Stage-2 fine-tuning on graded human ratings.
//!
//! The click tower and the shared embedding table stay frozen. A second MLP
//! is trained from random initialization on the same `2d` feature rows, and
//! depending on the [`ScoringMode`] its logit replaces or is added to the
//! click logit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{Optimizer, OptimizerConfig, Tape, Tensor};
use crate::text::{TokenSeq, Vocab};
use crate::tower::{self, Mlp, TowerConfig, TowerParams};
use crate::{Error, Result};

/// Five-level relevance grade, ordered `Bad < Fair < Good < Excellent < Perfect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Grade {
    Bad,
    Fair,
    Good,
    Excellent,
    Perfect,
}

impl Grade {
    pub const ALL: [Grade; 5] = [Grade::Bad, Grade::Fair, Grade::Good, Grade::Excellent, Grade::Perfect];

    /// Good and above count as relevant.
    pub fn is_relevant(self) -> bool {
        self >= Grade::Good
    }

    /// NDCG gain exponent: Perfect..Bad map to 4..0.
    pub fn value(self) -> u32 {
        self as u32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Bad => "Bad",
            Grade::Fair => "Fair",
            Grade::Good => "Good",
            Grade::Excellent => "Excellent",
            Grade::Perfect => "Perfect",
        }
    }
}

/// Perfect/Excellent/Good → 1, Fair/Bad → 0.
pub fn binarize_rating(grade: Grade) -> u8 {
    u8::from(grade.is_relevant())
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Grade::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown grade {s:?}")))
    }
}

impl TryFrom<String> for Grade {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Grade> for String {
    fn from(g: Grade) -> String {
        g.as_str().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingExample {
    pub query: String,
    pub title: String,
    pub grade: Grade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Click tower alone.
    ClickOnly,
    /// Fine-tuned MLP alone, on the click embeddings.
    PointwiseSimple,
    /// Click logit plus fine-tuned logit, trained point-wise.
    PointwiseEnsemble,
    /// Click logit plus fine-tuned logit, trained on same-query grade pairs.
    PairwiseEnsemble,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 4] = [
        ScoringMode::ClickOnly,
        ScoringMode::PointwiseSimple,
        ScoringMode::PointwiseEnsemble,
        ScoringMode::PairwiseEnsemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::ClickOnly => "click_only",
            ScoringMode::PointwiseSimple => "pointwise_simple",
            ScoringMode::PointwiseEnsemble => "pointwise_ensemble",
            ScoringMode::PairwiseEnsemble => "pairwise_ensemble",
        }
    }

    fn uses_click(self) -> bool {
        !matches!(self, ScoringMode::PointwiseSimple)
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoringMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scoring mode {s:?}")))
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to score (query, title) pairs: the vocabulary, the
/// shared embedding table, the click MLP and, once fine-tuned, the second MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    vocab: Vocab,
    embedding: Tensor<f32>,
    click: Mlp<f32>,
    finetuned: Option<Mlp<f32>>,
    mode: ScoringMode,
    tower_config: TowerConfig,
}

impl ModelBundle {
    pub fn new(
        vocab: Vocab,
        embedding: Tensor<f32>,
        click: Mlp<f32>,
        finetuned: Option<Mlp<f32>>,
        mode: ScoringMode,
        tower_config: TowerConfig,
    ) -> Result<Self> {
        if embedding.shape().len() != 2 || embedding.rows() != vocab.len() {
            return Err(Error::shape(
                "model_bundle",
                format!("embedding {:?} for a vocab of {}", embedding.shape(), vocab.len()),
            ));
        }
        let width = 2 * embedding.cols();
        for mlp in std::iter::once(&click).chain(finetuned.as_ref()) {
            if mlp.input_width() != width || mlp.widths().last() != Some(&1) {
                return Err(Error::shape("model_bundle", format!("mlp widths {:?} on {width} inputs", mlp.widths())));
            }
        }
        if (mode == ScoringMode::ClickOnly) != finetuned.is_none() {
            return Err(Error::invalid(format!(
                "mode {mode} {} a fine-tuned tower",
                if finetuned.is_none() { "requires" } else { "does not use" }
            )));
        }
        Ok(ModelBundle { vocab, embedding, click, finetuned, mode, tower_config })
    }

    /// A click-only bundle around a stage-1 tower.
    pub fn from_click(vocab: Vocab, params: TowerParams<f32>) -> Result<Self> {
        Self::new(vocab, params.embedding, params.mlp, None, ScoringMode::ClickOnly, params.config)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embedding(&self) -> &Tensor<f32> {
        &self.embedding
    }

    pub fn click_mlp(&self) -> &Mlp<f32> {
        &self.click
    }

    pub fn finetuned_mlp(&self) -> Option<&Mlp<f32>> {
        self.finetuned.as_ref()
    }

    pub fn mode(&self) -> ScoringMode {
        self.mode
    }

    pub fn tower_config(&self) -> &TowerConfig {
        &self.tower_config
    }

    /// The stage-1 tower as standalone parameters.
    pub fn click_tower(&self) -> TowerParams<f32> {
        TowerParams { embedding: self.embedding.clone(), mlp: self.click.clone(), config: self.tower_config.clone() }
    }

    /// Drops the fine-tuned tower and scores with the click tower only.
    pub fn into_click_only(self) -> Self {
        ModelBundle { finetuned: None, mode: ScoringMode::ClickOnly, ..self }
    }

    /// Score of one pair under the bundle's mode.
    pub fn score(&self, query: &str, title: &str) -> Result<f32> {
        Ok(self.score_batch(&[(query, title)])?[0])
    }

    pub fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f32>> {
        let encoded: Vec<(TokenSeq, TokenSeq)> =
            pairs.iter().map(|(q, t)| (self.vocab.encode(q), self.vocab.encode(t))).collect();
        let refs: Vec<(&TokenSeq, &TokenSeq)> = encoded.iter().map(|(q, t)| (q, t)).collect();
        self.score_encoded(&refs)
    }

    pub fn score_encoded(&self, pairs: &[(&TokenSeq, &TokenSeq)]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(4096) {
            let x = tower::feature_matrix(&self.embedding, chunk)?;
            let (click, ft) = self.component_scores(&x)?;
            out.extend(combine(self.mode, &click, &ft));
        }
        Ok(out)
    }

    fn component_scores(&self, x: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
        let click = if self.mode.uses_click() { self.click.forward(x)?.into_data() } else { Vec::new() };
        let ft = match &self.finetuned {
            Some(mlp) => mlp.forward(x)?.into_data(),
            None => Vec::new(),
        };
        Ok((click, ft))
    }
}

fn combine(mode: ScoringMode, click: &[f32], ft: &[f32]) -> Vec<f32> {
    match mode {
        ScoringMode::ClickOnly => click.to_vec(),
        ScoringMode::PointwiseSimple => ft.to_vec(),
        ScoringMode::PointwiseEnsemble | ScoringMode::PairwiseEnsemble => {
            click.iter().zip(ft).map(|(&c, &f)| c + f).collect()
        }
    }
}

pub fn ensemble_score(query: &str, title: &str, bundle: &ModelBundle) -> Result<f32> {
    bundle.score(query, title)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: ScoringMode,
    pub steps: usize,
    pub batch_size: usize,
    /// Widths of the fine-tuned MLP; `None` copies the click tower's.
    pub layers: Option<Vec<usize>>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: ScoringMode::PointwiseEnsemble,
            steps: 1000,
            batch_size: 128,
            layers: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

/// Index pairs `(higher, lower)` of same-query examples with different grades.
pub fn discordant_pairs(examples: &[RatingExample]) -> Vec<(usize, usize)> {
    let mut by_query: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_query.entry(&ex.query).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for idx in by_query.values() {
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                match examples[i].grade.cmp(&examples[j].grade) {
                    std::cmp::Ordering::Greater => pairs.push((i, j)),
                    std::cmp::Ordering::Less => pairs.push((j, i)),
                    std::cmp::Ordering::Equal => {}
                }
            }
        }
    }
    pairs
}

/// Trains a fresh MLP on frozen click features.
///
/// Point-wise modes minimize the logistic loss of the mode's score against
/// the binarized grade. `PairwiseEnsemble` minimizes the logistic loss of
/// `score(q, higher) - score(q, lower)` against label 1 over all
/// grade-discordant same-query pairs. `ClickOnly` returns the click bundle.
pub fn finetune(train: &[RatingExample], click: &ModelBundle, config: &FinetuneConfig) -> Result<ModelBundle> {
    if train.is_empty() {
        return Err(Error::invalid("no rating examples to fine-tune on"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let base = click.clone().into_click_only();
    if config.mode == ScoringMode::ClickOnly {
        return Ok(base);
    }

    let d = base.embedding.cols();
    let width = 2 * d;
    let mut features = Vec::with_capacity(train.len() * width);
    for ex in train {
        let q = base.vocab.encode(&ex.query);
        let t = base.vocab.encode(&ex.title);
        features.extend(tower::features(&base.embedding, &q, &t)?);
    }
    let features = Tensor::new(vec![train.len(), width], features)?;
    let click_scores = if config.mode.uses_click() {
        base.click.forward(&features)?.into_data()
    } else {
        vec![0.0; train.len()]
    };

    let layers = config.layers.clone().unwrap_or_else(|| base.click.widths());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mlp = Mlp::<f32>::init(width, &layers, &mut rng)?;
    let mut optimizer = Optimizer::new(&config.optimizer);

    // Training units: single examples, or (higher, lower) index pairs.
    let units: Vec<(usize, Option<usize>)> = if config.mode == ScoringMode::PairwiseEnsemble {
        let pairs = discordant_pairs(train);
        if pairs.is_empty() {
            return Err(Error::invalid("pairwise fine-tuning found no same-query pairs with different grades"));
        }
        pairs.into_iter().map(|(hi, lo)| (hi, Some(lo))).collect()
    } else {
        (0..train.len()).map(|i| (i, None)).collect()
    };
    let labels: Vec<f32> = train.iter().map(|ex| f32::from(binarize_rating(ex.grade))).collect();
    let batch_size = config.batch_size.min(units.len());
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut cursor = order.len();

    for _ in 0..config.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(order.len());
        let batch: Vec<(usize, Option<usize>)> = order[cursor..end].iter().map(|&u| units[u]).collect();
        cursor = end;

        let grads: Vec<Tensor<f32>> = {
            let mut tape = Tape::new();
            let nodes = mlp.bind(&mut tape)?;
            let loss = if config.mode == ScoringMode::PairwiseEnsemble {
                let hi: Vec<usize> = batch.iter().map(|u| u.0).collect();
                let lo: Vec<usize> = batch.iter().map(|u| u.1.expect("pair unit")).collect();
                let x = gather_rows(&features, hi.iter().chain(&lo))?;
                let xn = tape.constant(x)?;
                let out = nodes.forward(&mut tape, xn)?;
                let top = tape.slice_rows(out, 0, hi.len())?;
                let bottom = tape.slice_rows(out, hi.len(), lo.len())?;
                let diff = tape.sub(top, bottom)?;
                let offset: Vec<f32> = hi.iter().zip(&lo).map(|(&h, &l)| click_scores[h] - click_scores[l]).collect();
                let offset = tape.constant(Tensor::new(vec![hi.len(), 1], offset)?)?;
                let logits = tape.add(diff, offset)?;
                tape.logloss_sum(logits, &vec![1.0; hi.len()])?
            } else {
                let idx: Vec<usize> = batch.iter().map(|u| u.0).collect();
                let xn = tape.constant(gather_rows(&features, idx.iter())?)?;
                let out = nodes.forward(&mut tape, xn)?;
                let logits = if config.mode.uses_click() {
                    let offset: Vec<f32> = idx.iter().map(|&i| click_scores[i]).collect();
                    let offset = tape.constant(Tensor::new(vec![idx.len(), 1], offset)?)?;
                    tape.add(out, offset)?
                } else {
                    out
                };
                let y: Vec<f32> = idx.iter().map(|&i| labels[i]).collect();
                tape.logloss_sum(logits, &y)?
            };
            let mut grads = tape.backward(loss)?;
            nodes.ids().into_iter().map(|id| grads.take(id).expect("parameter gradient")).collect()
        };
        let refs: Vec<&Tensor<f32>> = grads.iter().collect();
        optimizer.step(&mut mlp.params_mut(), &refs)?;
        if !mlp.is_finite() {
            return Err(Error::NonFinite("optimizer step"));
        }
    }

    ModelBundle::new(base.vocab, base.embedding, base.click, Some(mlp), config.mode, base.tower_config)
}

fn gather_rows<'a>(x: &Tensor<f32>, idx: impl Iterator<Item = &'a usize>) -> Result<Tensor<f32>> {
    let width = x.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for &i in idx {
        data.extend_from_slice(x.row(i));
        rows += 1;
    }
    Tensor::new(vec![rows, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(q: &str, t: &str, g: Grade) -> RatingExample {
        RatingExample { query: q.into(), title: t.into(), grade: g }
    }

    fn click_bundle() -> ModelBundle {
        let vocab = Vocab::build(["paper cup", "red phone", "blue phone case", "paper plate"], 100, 1).unwrap();
        let cfg = TowerConfig { embed_dim: 4, layers: vec![8, 1], seed: 3 };
        let params = TowerParams::init(&cfg, vocab.len()).unwrap();
        ModelBundle::from_click(vocab, params).unwrap()
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize_rating(Grade::Perfect), 1);
        assert_eq!(binarize_rating(Grade::Excellent), 1);
        assert_eq!(binarize_rating(Grade::Good), 1);
        assert_eq!(binarize_rating(Grade::Fair), 0);
        assert_eq!(binarize_rating(Grade::Bad), 0);
    }

    #[test]
    fn grade_parsing() {
        assert_eq!("Perfect".parse::<Grade>().unwrap(), Grade::Perfect);
        assert!("perfect".parse::<Grade>().is_err());
        let ex: RatingExample = serde_json::from_str(r#"{"query":"q","title":"t","grade":"Fair"}"#).unwrap();
        assert_eq!(ex.grade, Grade::Fair);
        assert!(serde_json::from_str::<RatingExample>(r#"{"query":"q","title":"t","grade":"Okay"}"#).is_err());
        assert_eq!(serde_json::to_string(&Grade::Good).unwrap(), "\"Good\"");
        assert_eq!(Grade::Perfect.value(), 4);
        assert_eq!(Grade::Bad.value(), 0);
    }

    #[test]
    fn click_only_matches_tower() {
        let b = click_bundle();
        let tower = b.click_tower();
        let q = b.vocab().encode("paper cup");
        let t = b.vocab().encode("red phone");
        assert_eq!(b.score("paper cup", "red phone").unwrap(), tower.score(&q, &t).unwrap());
    }

    #[test]
    fn zero_finetune_tower_is_additive_identity() {
        let b = click_bundle();
        let mut zero = Mlp::<f32>::init(8, &[8, 1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in zero.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ens = ModelBundle::new(
            b.vocab().clone(),
            b.embedding().clone(),
            b.click_mlp().clone(),
            Some(zero),
            ScoringMode::PointwiseEnsemble,
            b.tower_config().clone(),
        )
        .unwrap();
        assert_eq!(ens.score("paper cup", "paper plate").unwrap(), b.score("paper cup", "paper plate").unwrap());
    }

    #[test]
    fn bundle_validates_mode_and_shapes() {
        let b = click_bundle();
        let err = ModelBundle::new(
            b.vocab().clone(),
            b.embedding().clone(),
            b.click_mlp().clone(),
            None,
            ScoringMode::PointwiseSimple,
            b.tower_config().clone(),
        );
        assert!(err.is_err());
        let wrong = Mlp::<f32>::init(6, &[1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let err = ModelBundle::new(
            b.vocab().clone(),
            b.embedding().clone(),
            b.click_mlp().clone(),
            Some(wrong),
            ScoringMode::PointwiseSimple,
            b.tower_config().clone(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn discordant_pairs_brute_force() {
        let ex = vec![
            rating("a", "1", Grade::Perfect),
            rating("a", "2", Grade::Bad),
            rating("b", "3", Grade::Good),
            rating("a", "4", Grade::Perfect),
            rating("b", "5", Grade::Good),
            rating("a", "6", Grade::Fair),
        ];
        let pairs = discordant_pairs(&ex);
        let mut brute = 0;
        for i in 0..ex.len() {
            for j in 0..ex.len() {
                if ex[i].query == ex[j].query && ex[i].grade > ex[j].grade {
                    brute += 1;
                    assert!(pairs.contains(&(i, j)));
                }
            }
        }
        assert_eq!(pairs.len(), brute);
        assert_eq!(brute, 5);
    }

    #[test]
    fn finetune_freezes_click_tower() {
        let b = click_bundle();
        let train = vec![
            rating("paper cup", "paper plate", Grade::Good),
            rating("paper cup", "red phone", Grade::Bad),
            rating("red phone", "blue phone case", Grade::Excellent),
            rating("red phone", "paper plate", Grade::Fair),
        ];
        for mode in [ScoringMode::PointwiseSimple, ScoringMode::PointwiseEnsemble, ScoringMode::PairwiseEnsemble] {
            let cfg = FinetuneConfig { mode, steps: 20, batch_size: 2, ..Default::default() };
            let tuned = finetune(&train, &b, &cfg).unwrap();
            assert_eq!(tuned.embedding(), b.embedding());
            assert_eq!(tuned.click_mlp(), b.click_mlp());
            assert_eq!(tuned.mode(), mode);
            let again = finetune(&train, &b, &cfg).unwrap();
            assert_eq!(tuned, again);
        }
    }

    #[test]
    fn zero_step_finetune_is_click_plus_init() {
        let b = click_bundle();
        let train = vec![rating("paper cup", "paper plate", Grade::Good)];
        let cfg = FinetuneConfig { steps: 0, seed: 5, ..Default::default() };
        let tuned = finetune(&train, &b, &cfg).unwrap();
        let init = Mlp::<f32>::init(8, &[8, 1], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(tuned.finetuned_mlp(), Some(&init));
    }

    #[test]
    fn pairwise_without_discordant_pairs_fails() {
        let b = click_bundle();
        let train = vec![rating("q", "paper plate", Grade::Good), rating("r", "red phone", Grade::Bad)];
        let cfg = FinetuneConfig { mode: ScoringMode::PairwiseEnsemble, ..Default::default() };
        assert!(finetune(&train, &b, &cfg).is_err());
    }

    #[test]
    fn constant_labels_still_train() {
        let b = click_bundle();
        let train = vec![rating("paper cup", "paper plate", Grade::Good), rating("red phone", "red phone", Grade::Perfect)];
        let cfg = FinetuneConfig { steps: 5, ..Default::default() };
        assert!(finetune(&train, &b, &cfg).is_ok());
    }
}

//! The single-tower scoring function.
//!
//! Query and title are each reduced to an embedding bag, the two bags are
//! concatenated into a `2d` feature row, and a feed-forward net with ReLU
//! hidden layers and a linear width-1 output maps that row to a logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad::{NodeId, Real, Tape, Tensor};
use crate::text::TokenSeq;
use crate::{Error, Result};

/// Widths of the layers used in production-scale training.
pub const PAPER_LAYERS: [usize; 4] = [1024, 256, 64, 1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub embed_dim: usize,
    /// Output widths of every layer; the last one must be 1.
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig { embed_dim: 64, layers: vec![128, 64, 1], seed: 0 }
    }
}

impl TowerConfig {
    pub fn paper_scale() -> Self {
        TowerConfig { layers: PAPER_LAYERS.to_vec(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be at least 1"));
        }
        validate_layers(&self.layers)
    }
}

pub(crate) fn validate_layers(layers: &[usize]) -> Result<()> {
    if layers.last() != Some(&1) {
        return Err(Error::invalid(format!("last layer must have width 1, got {layers:?}")));
    }
    if layers.contains(&0) {
        return Err(Error::invalid(format!("layer widths must be positive, got {layers:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real = f32> {
    /// `[fan_in, fan_out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// The feed-forward part of a tower, applied to `2d`-wide feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_width: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        validate_layers(widths)?;
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_width;
        for &fan_out in widths {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                .collect();
            layers.push(Dense {
                weight: Tensor::new(vec![fan_in, fan_out], data)?,
                bias: Tensor::zeros(vec![fan_out]),
            });
            fan_in = fan_out;
        }
        Ok(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.shape()[0])
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.bias.numel()).collect()
    }

    /// Maps `[m, 2d]` feature rows to `[m, 1]` logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.cols() != self.input_width() {
            return Err(Error::shape(
                "tower_forward",
                format!("expected rows of width {}, got shape {:?}", self.input_width(), x.shape()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = crate::grad::tensor_affine(&h, &layer.weight, &layer.bias)?;
            if i < last {
                crate::grad::tensor_relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Result<MlpNodes> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push((tape.param(&layer.weight)?, tape.param(&layer.bias)?));
        }
        Ok(MlpNodes { layers })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense { weight: l.weight.cast(), bias: l.bias.cast() })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn final_bias_mut(&mut self) -> &mut T {
        let last = self.layers.last_mut().expect("mlp has at least one layer");
        &mut last.bias.data_mut()[0]
    }
}

/// Tape handles for the weights of an [`Mlp`], in parameter order.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Pre-activations of the first layer for inputs `[x_left, x_right]`,
    /// computed as `x_left·W_top + b` and `x_right·W_bottom` so that callers
    /// can combine row blocks before the sum.
    pub fn first_layer_halves<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        left: NodeId,
        right: &[NodeId],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (w, b) = self.layers[0];
        let split = tape.value(left).cols();
        let rows = tape.value(w).rows();
        let width = tape.value(w).cols();
        let top = tape.slice_rows(w, 0, split)?;
        let bottom = tape.slice_rows(w, split, rows - split)?;
        let left_pre = tape.affine(left, top, b)?;
        let zero = tape.constant(Tensor::zeros(vec![width]))?;
        let right_pre = right.iter().map(|&x| tape.affine(x, bottom, zero)).collect::<Result<_>>()?;
        Ok((left_pre, right_pre))
    }

    /// Finishes the forward pass from first-layer pre-activations.
    pub fn forward_from_first<T: Real>(&self, tape: &mut Tape<'_, T>, pre: NodeId) -> Result<NodeId> {
        let mut h = pre;
        for &(w, b) in &self.layers[1..] {
            h = tape.relu(h)?;
            h = tape.affine(h, w, b)?;
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Embedding-bag features of one sequence: the sum of the referenced rows
/// divided by `sqrt(max(len, 1))`.
pub fn embed_bag<T: Real>(table: &Tensor<T>, seq: &TokenSeq) -> Result<Vec<T>> {
    let dim = table.cols();
    let mut out = vec![T::zero(); dim];
    for &id in &seq.ids {
        if id as usize >= table.rows() {
            return Err(Error::shape("embed_bag", format!("id {id} out of range for {} rows", table.rows())));
        }
        for (o, &v) in out.iter_mut().zip(table.row(id as usize)) {
            *o = *o + v;
        }
    }
    let scale = crate::grad::bag_scale::<T>(seq.ids.len());
    out.iter_mut().for_each(|v| *v = *v * scale);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams<T: Real = f32> {
    /// `[V, d]`
    pub embedding: Tensor<T>,
    pub mlp: Mlp<T>,
    pub config: TowerConfig,
}

impl<T: Real> TowerParams<T> {
    /// Embeddings ~ U(-0.05, 0.05), Glorot-uniform weights, zero biases; a
    /// pure function of `config` (including its seed) and `vocab_size`.
    pub fn init(config: &TowerConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::invalid("vocab size must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let embedding = (0..vocab_size * d)
            .map(|_| loop {
                let v: f64 = rng.random_range(-0.05..0.05);
                if v != -0.05 {
                    break T::from_f64(v);
                }
            })
            .collect();
        let embedding = Tensor::new(vec![vocab_size, d], embedding)?;
        let mlp = Mlp::init(2 * d, &config.layers, &mut rng)?;
        Ok(TowerParams { embedding, mlp, config: config.clone() })
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// The `2d` feature row `[bag(query), bag(title)]`.
    pub fn features(&self, query: &TokenSeq, title: &TokenSeq) -> Result<Vec<T>> {
        features(&self.embedding, query, title)
    }

    /// Tower logit for one (query, title) pair.
    pub fn score(&self, query: &TokenSeq, title: &TokenSeq) -> Result<T> {
        let x = Tensor::new(vec![1, 2 * self.embed_dim()], self.features(query, title)?)?;
        Ok(self.mlp.forward(&x)?.data()[0])
    }

    pub fn score_batch(&self, pairs: &[(&TokenSeq, &TokenSeq)]) -> Result<Vec<T>> {
        score_batch(&self.embedding, &self.mlp, pairs)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Result<TowerNodes> {
        let embedding = tape.param(&self.embedding)?;
        let mlp = self.mlp.bind(tape)?;
        Ok(TowerNodes { embedding, mlp })
    }

    /// Embedding table first, then weight and bias of each layer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.mlp.params_mut());
        out
    }

    pub fn cast<U: Real>(&self) -> TowerParams<U> {
        TowerParams { embedding: self.embedding.cast(), mlp: self.mlp.cast(), config: self.config.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite() && self.mlp.is_finite()
    }
}

pub(crate) fn features<T: Real>(table: &Tensor<T>, query: &TokenSeq, title: &TokenSeq) -> Result<Vec<T>> {
    let mut row = embed_bag(table, query)?;
    row.extend(embed_bag(table, title)?);
    Ok(row)
}

pub(crate) fn feature_matrix<T: Real>(table: &Tensor<T>, pairs: &[(&TokenSeq, &TokenSeq)]) -> Result<Tensor<T>> {
    let width = 2 * table.cols();
    let mut data = Vec::with_capacity(pairs.len() * width);
    for (q, t) in pairs {
        data.extend(features(table, q, t)?);
    }
    Tensor::new(vec![pairs.len(), width], data)
}

pub(crate) fn score_batch<T: Real>(
    table: &Tensor<T>,
    mlp: &Mlp<T>,
    pairs: &[(&TokenSeq, &TokenSeq)],
) -> Result<Vec<T>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let x = feature_matrix(table, pairs)?;
    Ok(mlp.forward(&x)?.into_data())
}

/// Tape handles for a bound [`TowerParams`].
#[derive(Debug, Clone)]
pub struct TowerNodes {
    pub embedding: NodeId,
    pub mlp: MlpNodes,
}

impl TowerNodes {
    /// Embedding table first, then the MLP parameters; matches
    /// [`TowerParams::params_mut`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embedding];
        ids.extend(self.mlp.ids());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(config: &TowerConfig, vocab: usize) -> TowerParams<f64> {
        let mut p = TowerParams::<f64>::init(config, vocab).unwrap();
        for t in p.mlp.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        let cfg = TowerConfig { embed_dim: 8, layers: vec![16, 8, 1], seed: 9 };
        let a = TowerParams::<f32>::init(&cfg, 50).unwrap();
        let b = TowerParams::<f32>::init(&cfg, 50).unwrap();
        assert_eq!(a, b);
        assert!(a.embedding.data().iter().all(|v| v.abs() < 0.05));
        assert!(a.mlp.layers.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
        assert_eq!(a.mlp.input_width(), 16);
        let other = TowerParams::<f32>::init(&TowerConfig { seed: 10, ..cfg }, 50).unwrap();
        assert_ne!(a.embedding, other.embedding);
    }

    #[test]
    fn glorot_limits_hold() {
        let cfg = TowerConfig { embed_dim: 4, layers: vec![6, 1], seed: 1 };
        let p = TowerParams::<f64>::init(&cfg, 3).unwrap();
        let limit = (6.0f64 / (8 + 6) as f64).sqrt();
        assert!(p.mlp.layers[0].weight.data().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let bad_last = TowerConfig { layers: vec![4, 2], ..Default::default() };
        assert!(TowerParams::<f32>::init(&bad_last, 5).is_err());
        let zero_width = TowerConfig { layers: vec![0, 1], ..Default::default() };
        assert!(TowerParams::<f32>::init(&zero_width, 5).is_err());
        assert!(TowerParams::<f32>::init(&TowerConfig::default(), 0).is_err());
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let cfg = TowerConfig { embed_dim: 4, layers: vec![3, 1], seed: 2 };
        let mut p = zeroed(&cfg, 10);
        let q = TokenSeq::new(vec![1, 2]);
        let t = TokenSeq::new(vec![3]);
        assert_eq!(p.score(&q, &t).unwrap(), 0.0);
        *p.mlp.final_bias_mut() = 1.25;
        let empty = TokenSeq::default();
        assert_eq!(p.score(&empty, &empty).unwrap(), 1.25);
    }

    #[test]
    fn final_bias_shift_moves_every_score() {
        let cfg = TowerConfig { embed_dim: 4, layers: vec![5, 1], seed: 3 };
        let p = TowerParams::<f64>::init(&cfg, 10).unwrap();
        let mut shifted = p.clone();
        *shifted.mlp.final_bias_mut() += 7.5;
        let q = TokenSeq::new(vec![4]);
        let t = TokenSeq::new(vec![5, 6]);
        let diff = shifted.score(&q, &t).unwrap() - p.score(&q, &t).unwrap();
        assert!((diff - 7.5).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = TowerParams::<f32>::init(&TowerConfig { embed_dim: 2, layers: vec![1], seed: 0 }, 3).unwrap();
        let x = Tensor::zeros(vec![2, 3]);
        assert!(p.mlp.forward(&x).is_err());
    }

    #[test]
    fn query_half_matters() {
        let cfg = TowerConfig { embed_dim: 4, layers: vec![8, 1], seed: 5 };
        let p = TowerParams::<f64>::init(&cfg, 10).unwrap();
        let t = TokenSeq::new(vec![3]);
        let a = p.score(&TokenSeq::new(vec![1]), &t).unwrap();
        let b = p.score(&TokenSeq::new(vec![2]), &t).unwrap();
        assert_ne!(a, b);
    }
}

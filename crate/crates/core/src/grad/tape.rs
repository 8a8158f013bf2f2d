use std::borrow::Cow;

use super::tensor::{self, Tensor};
use super::{hinge_neg, hinge_neg_grad, logloss, logloss_grad, Real};
use crate::text::TokenSeq;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    EmbedBag { table: NodeId, ids: Vec<u32>, offsets: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    CyclicShift { input: NodeId, shift: usize },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    SliceRows { input: NodeId, start: usize, len: usize },
    ShiftedSums { base: NodeId, first: NodeId, second: NodeId, shifts: usize },
    LoglossSum { logits: NodeId, labels: Vec<T> },
    HingeSum { logits: NodeId, margin: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::EmbedBag { .. } => "embed_bag",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::CyclicShift { .. } => "row_cyclic_shift",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::SliceRows { .. } => "slice_rows",
            Op::ShiftedSums { .. } => "shifted_sums",
            Op::LoglossSum { .. } => "logloss_sum",
            Op::HingeSum { .. } => "hinge_sum",
        }
    }
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Parameters are borrowed for the lifetime of the tape.
pub struct Tape<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: &'p Tensor<T>) -> Result<NodeId> {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<T>) -> Result<NodeId> {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Row `i` of the result is the sum of the table rows named by `bags[i]`,
    /// scaled by `1 / sqrt(max(len, 1))`. An empty bag gives a zero row.
    pub fn embed_bag(&mut self, table: NodeId, bags: &[&TokenSeq]) -> Result<NodeId> {
        let tab = self.value(table);
        if tab.shape().len() != 2 {
            return Err(Error::shape("embed_bag", "table must be [V, d]"));
        }
        let (vocab, dim) = (tab.shape()[0], tab.shape()[1]);
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(bags.len() + 1);
        offsets.push(0);
        let mut out = vec![T::zero(); bags.len() * dim];
        for (row, bag) in out.chunks_mut(dim.max(1)).zip(bags) {
            for &id in &bag.ids {
                if id as usize >= vocab {
                    return Err(Error::shape("embed_bag", format!("id {id} out of range for {vocab} rows")));
                }
                for (o, &v) in row.iter_mut().zip(tab.row(id as usize)) {
                    *o = *o + v;
                }
            }
            let scale = bag_scale::<T>(bag.ids.len());
            row.iter_mut().for_each(|v| *v = *v * scale);
            ids.extend_from_slice(&bag.ids);
            offsets.push(ids.len());
        }
        let value = Tensor::new(vec![bags.len(), dim], out)?;
        let needs = self.needs(table);
        self.push(Cow::Owned(value), Op::EmbedBag { table, ids, offsets }, needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::concat_cols(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::ConcatCols(a, b), needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_rows(&values)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Cow::Owned(value), Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Row `i` of the result is row `(i - shift) mod n` of the input.
    pub fn row_cyclic_shift(&mut self, input: NodeId, shift: usize) -> Result<NodeId> {
        let value = tensor::row_cyclic_shift(self.value(input), shift);
        let needs = self.needs(input);
        self.push(Cow::Owned(value), Op::CyclicShift { input, shift }, needs)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::affine(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Cow::Owned(value), Op::Affine { x, w, b }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::relu(self.value(x));
        let needs = self.needs(x);
        self.push(Cow::Owned(value), Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::zip_map("add", self.value(a), self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::zip_map("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Sub(a, b), needs)
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = tensor::slice_rows(self.value(input), start, len)?;
        let needs = self.needs(input);
        self.push(Cow::Owned(value), Op::SliceRows { input, start, len }, needs)
    }

    /// Row blocks `base + first`, `base + second`, then `base + shift^k(first)`
    /// for `k` in `1..=shifts`, stacked row-wise. All inputs are `[n, h]`.
    pub fn shifted_sums(&mut self, base: NodeId, first: NodeId, second: NodeId, shifts: usize) -> Result<NodeId> {
        let (b, f, s) = (self.value(base), self.value(first), self.value(second));
        if b.shape().len() != 2 || f.shape() != b.shape() || s.shape() != b.shape() {
            return Err(Error::shape(
                "shifted_sums",
                format!("{:?}, {:?}, {:?}", b.shape(), f.shape(), s.shape()),
            ));
        }
        let (n, h) = (b.rows(), b.cols());
        let mut out = Vec::with_capacity((shifts + 2) * n * h);
        let sum_rows = |out: &mut Vec<T>, other: &Tensor<T>, k: usize| {
            for i in 0..n {
                let src = (i + n - k % n) % n;
                out.extend(b.row(i).iter().zip(other.row(src)).map(|(&x, &y)| x + y));
            }
        };
        sum_rows(&mut out, f, 0);
        sum_rows(&mut out, s, 0);
        for k in 1..=shifts {
            sum_rows(&mut out, f, k);
        }
        let value = Tensor::new(vec![(shifts + 2) * n, h], out)?;
        let needs = self.needs(base) || self.needs(first) || self.needs(second);
        self.push(Cow::Owned(value), Op::ShiftedSums { base, first, second, shifts }, needs)
    }

    /// Sum of logistic losses of every element of `logits` against `labels`.
    pub fn logloss_sum(&mut self, logits: NodeId, labels: &[T]) -> Result<NodeId> {
        let x = self.value(logits);
        if x.numel() != labels.len() {
            return Err(Error::shape(
                "logloss_sum",
                format!("{} logits vs {} labels", x.numel(), labels.len()),
            ));
        }
        let total = x.data().iter().zip(labels).map(|(&v, &l)| logloss(v, l)).sum();
        let needs = self.needs(logits);
        let op = Op::LoglossSum { logits, labels: labels.to_vec() };
        self.push(Cow::Owned(Tensor::scalar(total)), op, needs)
    }

    /// Sum of `max(0, margin + x)` over every element of `logits`.
    pub fn hinge_sum(&mut self, logits: NodeId, margin: T) -> Result<NodeId> {
        let total = self.value(logits).data().iter().map(|&v| hinge_neg(v, margin)).sum();
        let needs = self.needs(logits);
        self.push(Cow::Owned(Tensor::scalar(total)), Op::HingeSum { logits, margin }, needs)
    }

    /// Reverse-mode pass from a scalar node. Every parameter leaf recorded
    /// before `root` gets a gradient, zero when `root` does not depend on it.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()])?);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor<T>| {
            if !self.needs(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::EmbedBag { table, ids, offsets } => {
                let tab = self.value(*table);
                let dim = tab.shape()[1];
                let mut dt = Tensor::zeros(tab.shape().to_vec());
                let data = dt.data_mut();
                for (row, span) in offsets.windows(2).enumerate() {
                    let bag = &ids[span[0]..span[1]];
                    let scale = bag_scale::<T>(bag.len());
                    let grow = g.row(row);
                    for &id in bag {
                        let dst = &mut data[id as usize * dim..(id as usize + 1) * dim];
                        for (d, &v) in dst.iter_mut().zip(grow) {
                            *d = *d + v * scale;
                        }
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let n = g.rows();
                let mut da = Vec::with_capacity(n * p);
                let mut db = Vec::with_capacity(n * q);
                for i in 0..n {
                    let row = g.row(i);
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
            }
            Op::ConcatRows(parts) => {
                let width = g.cols();
                let mut start = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        acc(p, Tensor::new(shape, g.data()[start..start + len].to_vec())?);
                    }
                    start += len;
                }
                debug_assert_eq!(start, g.rows() * width);
            }
            Op::CyclicShift { input, shift } => {
                let n = g.rows().max(1);
                acc(*input, tensor::row_cyclic_shift(g, n - shift % n));
            }
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, p) = (xv.rows(), xv.cols());
                let q = wv.cols();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * p];
                    T::gemm(n, q, p, g.data(), (q as isize, 1), wv.data(), (1, q as isize), T::zero(), &mut dx);
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); p * q];
                    T::gemm(p, n, q, xv.data(), (1, p as isize), g.data(), (q as isize, 1), T::zero(), &mut dw);
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); q];
                    for i in 0..n {
                        for (d, &v) in db.iter_mut().zip(g.row(i)) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::Relu(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&out, &gv)| if out > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg = g.data().iter().map(|&v| -v).collect();
                acc(*b, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Op::SliceRows { input, start, len } => {
                let iv = self.value(*input);
                let c = iv.cols();
                let mut d = Tensor::zeros(iv.shape().to_vec());
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                acc(*input, d);
            }
            Op::ShiftedSums { base, first, second, shifts } => {
                let shape = self.value(*base).shape().to_vec();
                let (n, h) = (shape[0], shape[1]);
                let block = |k: usize| &g.data()[k * n * h..(k + 1) * n * h];
                let mut db = vec![T::zero(); n * h];
                let mut df = vec![T::zero(); n * h];
                for k in 0..shifts + 2 {
                    for (d, &v) in db.iter_mut().zip(block(k)) {
                        *d = *d + v;
                    }
                }
                for (d, &v) in df.iter_mut().zip(block(0)) {
                    *d = *d + v;
                }
                for k in 1..=*shifts {
                    let gk = block(k + 1);
                    for i in 0..n {
                        let src = (i + n - k % n) % n;
                        let dst = &mut df[src * h..(src + 1) * h];
                        for (d, &v) in dst.iter_mut().zip(&gk[i * h..(i + 1) * h]) {
                            *d = *d + v;
                        }
                    }
                }
                acc(*base, Tensor::new(shape.clone(), db)?);
                acc(*first, Tensor::new(shape.clone(), df)?);
                acc(*second, Tensor::new(shape, block(1).to_vec())?);
            }
            Op::LoglossSum { logits, labels } => {
                let x = self.value(*logits);
                let scale = g.data()[0];
                let data = x
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&v, &l)| scale * logloss_grad(v, l))
                    .collect();
                acc(*logits, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::HingeSum { logits, margin } => {
                let x = self.value(*logits);
                let scale = g.data()[0];
                let data = x.data().iter().map(|&v| scale * hinge_neg_grad(v, *margin)).collect();
                acc(*logits, Tensor::new(x.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn bag_scale<T: Real>(len: usize) -> T {
    T::one() / T::from_f64(len.max(1) as f64).sqrt()
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

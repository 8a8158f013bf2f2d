use super::Real;
use crate::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Builds a `[rows.len(), width]` matrix.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { shape: vec![rows.len(), width], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading dimension; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            self.data.len()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        // `v - v` is 0 for finite v and NaN otherwise; lanes keep it vectorizable.
        let mut lanes = [T::zero(); 16];
        let chunks = self.data.chunks_exact(16);
        let rest = chunks.remainder();
        for chunk in chunks {
            for (l, &v) in lanes.iter_mut().zip(chunk) {
                *l = *l + (v - v);
            }
        }
        lanes.iter().all(|&l| l == T::zero()) && rest.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().expect("finite float")))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `x · w + b` with `b` broadcast over rows.
pub(crate) fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, p) = x.expect_matrix("affine")?;
    let (wp, q) = w.expect_matrix("affine")?;
    if wp != p || b.numel() != q {
        return Err(Error::shape(
            "affine",
            format!("x {:?} · w {:?} + b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let mut out = Vec::with_capacity(n * q);
    for _ in 0..n {
        out.extend_from_slice(&b.data);
    }
    T::gemm(n, p, q, &x.data, (p as isize, 1), &w.data, (q as isize, 1), T::one(), &mut out);
    Ok(Tensor { shape: vec![n, q], data: out })
}

pub(crate) fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

pub(crate) fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

pub(crate) fn concat_cols<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, p) = a.expect_matrix("concat_cols")?;
    let (m, q) = b.expect_matrix("concat_cols")?;
    if n != m {
        return Err(Error::shape("concat_cols", format!("{n} rows vs {m} rows")));
    }
    let mut data = Vec::with_capacity(n * (p + q));
    for i in 0..n {
        data.extend_from_slice(&a.data[i * p..(i + 1) * p]);
        data.extend_from_slice(&b.data[i * q..(i + 1) * q]);
    }
    Ok(Tensor { shape: vec![n, p + q], data })
}

pub(crate) fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("concat_rows", "no inputs"));
    };
    let (_, width) = first.expect_matrix("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for part in parts {
        let (r, c) = part.expect_matrix("concat_rows")?;
        if c != width {
            return Err(Error::shape("concat_rows", format!("width {c} vs {width}")));
        }
        rows += r;
        data.extend_from_slice(&part.data);
    }
    Ok(Tensor { shape: vec![rows, width], data })
}

/// Row `i` of the result is row `(i - shift) mod n` of the input.
pub fn row_cyclic_shift<T: Real>(x: &Tensor<T>, shift: usize) -> Tensor<T> {
    let n = x.rows();
    let c = x.cols();
    if n == 0 {
        return x.clone();
    }
    let mut data = Vec::with_capacity(x.numel());
    for i in 0..n {
        let src = (i + n - shift % n) % n;
        data.extend_from_slice(&x.data[src * c..(src + 1) * c]);
    }
    Tensor { shape: x.shape.clone(), data }
}

pub(crate) fn slice_rows<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let n = x.rows();
    if start + len > n {
        return Err(Error::shape("slice_rows", format!("rows {start}..{} of {n}", start + len)));
    }
    let c = x.cols();
    let mut shape = x.shape.clone();
    if shape.len() <= 1 {
        shape = vec![len, c];
    } else {
        shape[0] = len;
    }
    Ok(Tensor { shape, data: x.data[start * c..(start + len) * c].to_vec() })
}

pub(crate) fn zip_map<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let x = m(&[&[1.0, 2.0]]);
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zero_b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(affine(&x, &id, &zero_b).unwrap().data(), &[1.0, 2.0]);

        let zero_w = m(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(affine(&x, &zero_w, &b).unwrap().data(), &[3.0, 4.0]);

        let x = m(&[&[1.0, 1.0]]);
        let w = m(&[&[2.0], &[3.0]]);
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = m(&[&[1.0, 2.0, 3.0]]);
        let w = m(&[&[1.0], &[1.0]]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(affine(&x, &w, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn cyclic_shift_examples() {
        let x = m(&[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(row_cyclic_shift(&x, 1).data(), &[2.0, 0.0, 1.0]);
        assert_eq!(row_cyclic_shift(&x, 3), x);
        let one = m(&[&[5.0, 6.0]]);
        assert_eq!(row_cyclic_shift(&one, 1), one);
    }

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}

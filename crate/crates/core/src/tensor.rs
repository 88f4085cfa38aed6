//! Dense tensors and the multilinear primitives everything else is built on.
//!
//! Every tensor is stored in Little-Endian linearization: the first index
//! varies fastest, so element `(i1, ..., iN)` lives at flat offset
//! `i1 + I1*i2 + I1*I2*i3 + ...`. Matrices are `nalgebra::DMatrix`, which is
//! column-major, so `vec` of a matrix is the same convention restricted to
//! order 2. All mode indices in this crate are 0-based.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// An N-th order real tensor with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn checked_volume(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("tensor order must be at least 1".into()));
    }
    let mut volume = 1usize;
    for &s in shape {
        if s == 0 {
            return Err(Error::InvalidShape(format!("zero-sized mode in {shape:?}")));
        }
        volume = volume
            .checked_mul(s)
            .ok_or_else(|| Error::InvalidShape(format!("volume of {shape:?} overflows")))?;
    }
    Ok(volume)
}

/// Sizes `(a, I_n, b)` of the modes before, at and after `n`.
fn split_at_mode(shape: &[usize], n: usize) -> (usize, usize, usize) {
    let before = shape[..n].iter().product();
    let after = shape[n + 1..].iter().product();
    (before, shape[n], after)
}

fn check_mode(order: usize, n: usize) -> Result<()> {
    if n >= order {
        Err(Error::ModeOutOfRange { mode: n, order })
    } else {
        Ok(())
    }
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let volume = checked_volume(&shape)?;
        if data.len() != volume {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} needs {volume} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let volume = checked_volume(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![0.0; volume] })
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let volume = checked_volume(shape)?;
        let mut data = Vec::with_capacity(volume);
        let mut index = vec![0usize; shape.len()];
        for _ in 0..volume {
            data.push(f(&index));
            increment(&mut index, shape);
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Order-2 tensor holding the entries of `m`.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { shape: vec![m.nrows(), m.ncols()], data: m.as_slice().to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut offset = 0;
        let mut stride = 1;
        for (&i, &s) in index.iter().zip(&self.shape) {
            debug_assert!(i < s);
            offset += i * stride;
            stride *= s;
        }
        offset
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    /// Vectorization: a copy of the data in Little-Endian order.
    pub fn vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Same data, new shape of equal volume.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Mode-`n` unfolding: an `I_n x prod_{k != n} I_k` matrix whose column
    /// index linearizes the remaining modes Little-Endian.
    pub fn unfold(&self, n: usize) -> Result<Matrix> {
        check_mode(self.order(), n)?;
        let (a, rows, b) = split_at_mode(&self.shape, n);
        if a == 1 {
            return Ok(Matrix::from_column_slice(rows, b, &self.data));
        }
        let mut out = Matrix::zeros(rows, a * b);
        for ib in 0..b {
            for i in 0..rows {
                let src = &self.data[a * (i + rows * ib)..a * (i + rows * ib) + a];
                for (ia, &v) in src.iter().enumerate() {
                    out[(i, ia + a * ib)] = v;
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn fold(m: &Matrix, n: usize, shape: &[usize]) -> Result<Self> {
        let volume = checked_volume(shape)?;
        check_mode(shape.len(), n)?;
        let (a, rows, b) = split_at_mode(shape, n);
        if m.nrows() != rows || m.ncols() != a * b {
            return Err(Error::DimensionMismatch(format!(
                "cannot fold {}x{} matrix along mode {n} into {shape:?}",
                m.nrows(),
                m.ncols()
            )));
        }
        if a == 1 {
            return Self::new(shape.to_vec(), m.as_slice().to_vec());
        }
        let mut data = vec![0.0; volume];
        for ib in 0..b {
            for i in 0..rows {
                let dst = &mut data[a * (i + rows * ib)..a * (i + rows * ib) + a];
                for (ia, v) in dst.iter_mut().enumerate() {
                    *v = m[(i, ia + a * ib)];
                }
            }
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// n-mode product `self x_n m` with `m` of size `J x I_n`; mode `n` of
    /// the result has size `J`.
    pub fn mode_n_product(&self, m: &Matrix, n: usize) -> Result<Self> {
        check_mode(self.order(), n)?;
        let (data, shape) = mode_product_raw(&self.data, &self.shape, m, n)?;
        Ok(Self { shape, data })
    }

    /// Applies `self x_k m_k` for every `(k, m_k)` pair, in order.
    pub fn multi_mode_product<'a>(
        &self,
        products: impl IntoIterator<Item = (usize, &'a Matrix)>,
    ) -> Result<Self> {
        let mut out = self.clone();
        for (n, m) in products {
            out = out.mode_n_product(m, n)?;
        }
        Ok(out)
    }
}

/// Odometer increment of a Little-Endian multi-index.
pub(crate) fn increment(index: &mut [usize], shape: &[usize]) {
    for (i, &s) in index.iter_mut().zip(shape) {
        *i += 1;
        if *i < s {
            return;
        }
        *i = 0;
    }
}

/// Mode product on raw Little-Endian storage; returns the new data and shape.
pub(crate) fn mode_product_raw(
    data: &[f64],
    shape: &[usize],
    m: &Matrix,
    n: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (a, size, b) = split_at_mode(shape, n);
    if m.ncols() != size {
        return Err(Error::DimensionMismatch(format!(
            "mode-{n} product needs a matrix with {size} columns, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let j = m.nrows();
    let mut out_shape = shape.to_vec();
    out_shape[n] = j;
    let mut out = vec![0.0; a * j * b];
    if a == 1 {
        let x = DMatrixView::from_slice(data, size, b);
        let mut y = DMatrixViewMut::from_slice(&mut out, j, b);
        y.gemm(1.0, m, &x, 0.0);
    } else {
        let mt = m.transpose();
        for ib in 0..b {
            let x = DMatrixView::from_slice(&data[a * size * ib..a * size * (ib + 1)], a, size);
            let mut y = DMatrixViewMut::from_slice(&mut out[a * j * ib..a * j * (ib + 1)], a, j);
            y.gemm(1.0, &x, &mt, 0.0);
        }
    }
    Ok((out, out_shape))
}

/// Kronecker product: block `(r, s)` of the result is `a[(r, s)] * b`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// `U_first ⊗ ... ⊗ U_last` over a list of matrices, left to right.
pub fn kronecker_chain<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Matrix {
    let mut it = mats.into_iter();
    let mut acc = match it.next() {
        Some(m) => m.clone(),
        None => return Matrix::from_element(1, 1, 1.0),
    };
    for m in it {
        acc = kronecker(&acc, m);
    }
    acc
}

/// A bijection between flat index spaces, stored as a gather map:
/// destination position `k` takes the source element at `map[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexPermutation {
    map: Vec<usize>,
}

impl IndexPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &k in &map {
            if k >= map.len() || std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidShape("index map is not a bijection".into()));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(len: usize) -> Self {
        Self { map: (0..len).collect() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(k, &s)| k == s)
    }

    pub fn apply(&self, src: &[f64]) -> Result<Vec<f64>> {
        if src.len() != self.map.len() {
            return Err(Error::DimensionMismatch(format!(
                "permutation of length {} applied to {} elements",
                self.map.len(),
                src.len()
            )));
        }
        Ok(self.map.iter().map(|&k| src[k]).collect())
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (k, &s) in self.map.iter().enumerate() {
            inv[s] = k;
        }
        Self { map: inv }
    }

    /// `self.then(other).apply(x) == other.apply(&self.apply(x))`.
    pub fn then(&self, other: &Self) -> Self {
        Self { map: other.map.iter().map(|&k| self.map[k]).collect() }
    }

    /// Permutes the rows of a matrix: row `k` of the result is row `map[k]`.
    pub fn permute_rows(&self, m: &Matrix) -> Result<Matrix> {
        if m.nrows() != self.map.len() {
            return Err(Error::DimensionMismatch(format!(
                "permutation of length {} applied to {} rows",
                self.map.len(),
                m.nrows()
            )));
        }
        Ok(Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(self.map[r], c)]))
    }
}

/// Position of a multi-index inside `vec(unfold(T, n))`.
fn unfolded_position(index: &[usize], shape: &[usize], n: usize) -> usize {
    let mut col = 0;
    let mut stride = 1;
    for (k, (&i, &s)) in index.iter().zip(shape).enumerate() {
        if k != n {
            col += i * stride;
            stride *= s;
        }
    }
    index[n] + shape[n] * col
}

/// The permutation taking `vec(unfold(T, m))` to `vec(unfold(T, n))` for any
/// tensor `T` of the given shape.
pub fn mode_permutation(shape: &[usize], n: usize, m: usize) -> Result<IndexPermutation> {
    let volume = checked_volume(shape)?;
    check_mode(shape.len(), n)?;
    check_mode(shape.len(), m)?;
    if n == m {
        return Ok(IndexPermutation::identity(volume));
    }
    let mut map = vec![0usize; volume];
    let mut index = vec![0usize; shape.len()];
    for _ in 0..volume {
        map[unfolded_position(&index, shape, n)] = unfolded_position(&index, shape, m);
        increment(&mut index, shape);
    }
    Ok(IndexPermutation { map })
}

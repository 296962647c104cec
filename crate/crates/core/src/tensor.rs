//! Dense row-major f64 tensors and the handful of kernels the toy model needs.
//!
//! Reductions always run in ascending index order. Nothing here is parallel.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Width of a matrix (product of trailing dims for higher rank).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Contiguous row range `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows() {
            return Err(Error::dim(format!("row range {start}..{end} outside {} rows", self.rows())));
        }
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(shape, self.data[start * c..end * c].to_vec())
    }

    /// Stack along the leading axis; trailing dims must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!("cannot stack {:?} onto {:?}", p.shape, first.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|x| x * s).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if v.len() != c {
            return Err(Error::dim(format!("bias of {} onto width {c}", v.len())));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (x, b) in out[i * c..(i + 1) * c].iter_mut().zip(v) {
                *x += b;
            }
        }
        Self::matrix(r, c, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > c {
            return Err(Error::dim(format!("column range {start}..{end} outside {c}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self::matrix(r, w, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|x| f(*x)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        (self.shape == other.shape)
            .then(|| self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Index of the first element whose bit pattern differs, if any.
    pub fn first_bit_difference(&self, other: &Tensor) -> Option<usize> {
        if self.shape != other.shape {
            return Some(0);
        }
        self.data.iter().zip(&other.data).position(|(a, b)| a.to_bits() != b.to_bits())
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.first_bit_difference(other).is_none()
    }
}

/// `a[m×k] · b[k×n]`, accumulating each output in ascending `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            *o = acc;
        }
    }
    Tensor::matrix(m, n, out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = x.data.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Per-row normalization to zero mean and unit (eps-regularized) variance.
/// Mean and variance come from a single Welford pass.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if c == 0 {
        return Err(Error::dim("layer_norm over zero-width rows"));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (n, v) in row.iter().enumerate() {
            let d = v - mean;
            mean += d / (n + 1) as f64;
            m2 += d * (v - mean);
        }
        let inv = 1.0 / (m2 / c as f64 + eps).sqrt();
        for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    Tensor::matrix(r, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = RandomSource::new(seed);
        Tensor::matrix(rows, cols, r.normals(rows * cols)).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let i = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let a = random(5, 7, 1);
        let b = random(7, 3, 2);
        let got = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..7 {
                    acc += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = random(2, 3, 1);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1000.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 3f64.ln()]]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&random(6, 11, 5).scale(30.0)).unwrap();
        for i in 0..6 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_edge_rows() {
        let c = layer_norm(&Tensor::from_rows(&[&[5.0; 4]]).unwrap(), 1e-5).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
        let u = layer_norm(&Tensor::from_rows(&[&[1.0, -1.0]]).unwrap(), 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((u.data()[0] - expect).abs() < 1e-15);
        assert!((u.data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let x = random(8, 33, 9).scale(4.0);
        let got = layer_norm(&x, 1e-5).unwrap();
        for i in 0..8 {
            let row = x.row(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for (j, v) in row.iter().enumerate() {
                let want = (v - mean) / (var + 1e-5).sqrt();
                assert!((got.row(i)[j] - want).abs() <= 1e-12);
            }
            let m: f64 = got.row(i).iter().sum::<f64>() / n;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = random(4, 2, 3);
        assert_eq!(t.slice_rows(1, 3).unwrap().shape(), &[2, 2]);
        assert!(t.slice_rows(3, 5).is_err());
        let both = Tensor::concat_rows(&[&t, &t]).unwrap();
        assert_eq!(both.shape(), &[8, 2]);
        assert_eq!(both.slice_rows(4, 8).unwrap(), t);
    }
}

//! Dense row-major `f64` tensors with value semantics.
//!
//! A [`Tensor`] is immutable once built; its buffer is reference counted so
//! clones are cheap and tensors can be shared across threads. Every
//! operation returns a fresh tensor.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::macs;

/// Variance epsilon used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<f64>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    /// Builds a tensor from a buffer whose length is known to match.
    pub(crate) fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(vec![n, n], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("Tensor::from_rows", &[cols], &[bad.len()]));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(vec![rows.len(), cols], data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count when viewed as a matrix: product of trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_vec(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_vec(vec![n, m], out))
    }

    /// Matrix product `self · other`. Registers `m·n·k` MACs with the
    /// accounting hook when one is installed.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        matmul_impl(self, false, other, false)
    }

    /// Matrix product `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        matmul_impl(self, false, other, true)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("softmax_rows")?;
        let mut out = self.data.to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        Ok(Tensor::from_vec(self.shape.clone(), out))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// Row-wise layer normalization with biased variance and
    /// [`LAYER_NORM_EPS`], followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Self> {
        let (m, n) = self.as_matrix("layer_norm")?;
        if gain.len() != n || bias.len() != n {
            return Err(Error::dim("layer_norm", &self.shape, gain.shape()));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.data[r * n..(r + 1) * n];
            let (mean, inv_std) = row_moments(row);
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv_std * gain.data[j] + bias.data[j];
            }
        }
        Ok(Tensor::from_vec(self.shape.clone(), out))
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Mean and `1/sqrt(var + eps)` of one row.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn matmul_impl(a: &Tensor, a_t: bool, b: &Tensor, b_t: bool) -> Result<Tensor> {
    let op = if b_t { "matmul_nt" } else { "matmul" };
    let (ar, ac) = a.as_matrix(op)?;
    let (br, bc) = b.as_matrix(op)?;
    let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    macs::record((m * n * k) as u64);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), a_t, b.data(), b_t, &mut out, false);
    Ok(Tensor::from_vec(vec![m, n], out))
}

/// `c (m×n) ← [c +] op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is
/// `k×n`. With `a_t` the buffer `a` holds a `k×m` matrix; likewise `b_t`
/// means `b` holds `n×k`. Does not touch the MAC counter.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe in-bounds views of `a` (m×k),
    // `b` (k×n) and `c` (m×n), whose lengths are checked in debug builds
    // and guaranteed by every caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new([m, n], out).unwrap()
    }

    fn lcg_tensor(shape: [usize; 2], seed: u64) -> Tensor {
        let mut s = seed;
        let data: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg_tensor([5, 7], 1);
        let b = lcg_tensor([7, 3], 2);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
        let nt = a.matmul_nt(&b.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(err, Error::dim("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![1000.0, 0.0],
            vec![1f64.ln(), 3f64.ln()],
        ])
        .unwrap()
        .softmax_rows()
        .unwrap();
        assert_eq!(t.row(0), &[0.5, 0.5]);
        assert!((t.get(1, 0) - 1.0).abs() < 1e-9 && t.get(1, 1).abs() < 1e-9);
        assert!((t.get(2, 0) - 0.25).abs() < 1e-12);
        assert!((t.get(2, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1e6) - 1.0).abs() < 1e-12);
        for x in [-3.5, -0.1, 0.7, 12.0, -40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let gain = Tensor::full([3], 1.0);
        let bias = Tensor::zeros([3]);
        let c = Tensor::full([1, 3], 4.2).layer_norm(&gain, &bias).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));

        let g2 = Tensor::full([2], 1.0);
        let b2 = Tensor::zeros([2]);
        let r = Tensor::from_rows(&[vec![1.0, -1.0]])
            .unwrap()
            .layer_norm(&g2, &b2)
            .unwrap();
        // var = 1, so the only deviation is the epsilon: 1/sqrt(1 + 1e-6).
        let expected = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((r.get(0, 0) - expected).abs() < 1e-15);
        assert!((r.get(0, 1) + expected).abs() < 1e-15);

        let x = lcg_tensor([4, 9], 7);
        let y = x
            .layer_norm(&Tensor::full([9], 1.0), &Tensor::zeros([9]))
            .unwrap();
        for i in 0..4 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn reshape_rejects_bad_size() {
        assert!(Tensor::zeros([2, 3]).reshape([4, 2]).is_err());
        assert_eq!(
            Tensor::zeros([2, 3]).reshape([3, 2]).unwrap().shape(),
            &[3, 2]
        );
    }
}

//! Dense 2-D tensors over `f64`.
//!
//! Everything in the model is a matrix or a vector; vectors are stored as
//! `1 x n` matrices and scalars as `1 x 1`. Broadcasting is limited to row
//! vectors against matrices — anything else needs an explicit reshape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Row-major dense matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 {
            return Err(NumericsError::Shape(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 1 x n row vector.
    pub fn row(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    /// 1 x 1 scalar.
    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::Shape("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::Shape("from_rows: ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(gaussian(rng) * std);
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self) -> Result<f64, NumericsError> {
        if self.rows * self.cols != 1 {
            return Err(NumericsError::Shape(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// NaN/Inf is an error state; callers check at module boundaries.
    pub fn validate(&self, context: &'static str) -> Result<(), NumericsError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(context))
        }
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::Shape(format!(
                "axpy shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Box-Muller standard normal. Deterministic given the RNG state.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// C[i][j] = sum_t A[i][t] * B[t][j], accumulated in row-major i-k-j order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape(format!(
            "matmul inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor { rows: m, cols: n, data: out })
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax: x - logsumexp(x).
pub fn row_log_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// y[i][j] = gain[j] * x[i][j] / sqrt(mean_j(x[i]^2) + eps), applied per row.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    if gain.rows != 1 || gain.cols != x.cols {
        return Err(NumericsError::Shape(format!(
            "rms_norm gain must be 1x{}, got {}x{}",
            x.cols, gain.rows, gain.cols
        )));
    }
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let denom = (mean_sq + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gain.data[j] * *v / denom;
        }
    }
    Ok(out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::eye(2);
        let b = Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn matmul_permutation() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = Tensor::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let c = matmul(&a, &p).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        // Independent oracle: plain i-j-t loop order.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&mut rng, 3, 4, 1.0);
        let b = Tensor::randn(&mut rng, 4, 2, 1.0);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for t in 0..4 {
                    s += a.get(i, t) * b.get(t, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let s = row_softmax(&Tensor::row(&[0.0, 0.0]));
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.5).abs() < 1e-15);

        let s = row_softmax(&Tensor::row(&[2f64.ln(), 0.0]));
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let s = row_softmax(&Tensor::row(&[1000.0, 1000.0]));
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_constant_vector() {
        for c in [3.0, -2.5] {
            let x = Tensor::row(&[c; 5]);
            let y = rms_norm(&x, &Tensor::ones(1, 5), 0.0).unwrap();
            for j in 0..5 {
                assert!((y.get(0, j) - c.signum()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rms_norm_hand_evaluated() {
        // rms of [3,4] is sqrt(12.5)
        let y = rms_norm(&Tensor::row(&[3.0, 4.0]), &Tensor::ones(1, 2), 0.0).unwrap();
        assert!((y.get(0, 0) - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y.get(0, 1) - 1.131_370_849_898_476).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_zero_vector() {
        let y = rms_norm(&Tensor::row(&[0.0, 0.0, 0.0]), &Tensor::ones(1, 3), 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }
}

//! Dense row-major matrix kernels and their explicit backward counterparts.
//!
//! This is the numeric substrate for the toy transformer: matmul in the three
//! transpose variants the model needs, row softmax, RMS norm, SiLU, embedding
//! lookup, and shifted cross-entropy. Every op is a pure function, reduction
//! order is fixed (ascending inner index) so results are bit-deterministic per
//! precision, and every op checks its output for NaN/Inf — a non-finite entry
//! is a bug, not a value to propagate.
//!
//! Shape mismatches are contract violations and panic; the only recoverable
//! error in this module is a loss with empty support.

use thiserror::Error;

use crate::scalar::Scalar;

/// Token id type used across the crate.
pub type TokenId = u32;

/// Label id marking positions excluded from the loss.
pub const IGNORE_ID: TokenId = TokenId::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    /// Every shifted label position was `ignore_id`.
    #[error("empty loss support: all label positions ignored")]
    EmptyLossSupport,
    /// Shifted loss needs at least two positions.
    #[error("sequence too short for shifted loss: {0} rows")]
    SequenceTooShort(usize),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_f64_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Matrix::from_vec(rows, cols, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::ONE);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Total element count (`rows * cols`).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Append one row (used by the KV cache).
    pub fn push_row(&mut self, row: &[S]) {
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Copy of rows `[start, start+count)`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix<S> {
        assert!(start + count <= self.rows, "row slice out of range");
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Write `src` over rows `[start, start+src.rows)`.
    pub fn write_rows(&mut self, start: usize, src: &Matrix<S>) {
        assert_eq!(src.cols, self.cols, "write_rows width mismatch");
        assert!(start + src.rows <= self.rows, "write_rows out of range");
        self.data[start * self.cols..(start + src.rows) * self.cols].copy_from_slice(&src.data);
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, factor: S) {
        for v in self.data.iter_mut() {
            *v *= factor;
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "hadamard shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, op: &str) {
        assert!(self.is_all_finite(), "non-finite entries after {op}");
    }

    pub fn max_abs_diff(&self, other: &Matrix<S>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Standard product `self[m,k] x b[k,n]`. Reduction runs over ascending k.
    pub fn matmul(&self, b: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.cols, b.rows,
            "matmul inner dims: {}x{} vs {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (kk, &a_ik) in a_row.iter().enumerate().take(k) {
                let b_row = b.row(kk);
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        out.assert_finite("matmul");
        out
    }

    /// `self[m,k] x b[n,k]^T`. The common case for `[out,in]` weight layouts.
    pub fn matmul_nt(&self, b: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.cols, b.cols,
            "matmul_nt inner dims: {}x{} vs {}x{}^T",
            self.rows, self.cols, b.rows, b.cols
        );
        let (m, n) = (self.rows, b.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..n {
                let b_row = b.row(j);
                let mut acc = S::ZERO;
                for (av, bv) in a_row.iter().zip(b_row.iter()) {
                    acc += *av * *bv;
                }
                out_row[j] = acc;
            }
        }
        out.assert_finite("matmul_nt");
        out
    }

    /// `self[k,m]^T x b[k,n]`. Used by weight-gradient accumulation.
    pub fn matmul_tn(&self, b: &Matrix<S>) -> Matrix<S> {
        assert_eq!(
            self.rows, b.rows,
            "matmul_tn inner dims: {}x{}^T vs {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let (m, n) = (self.cols, b.cols);
        let mut out = Matrix::zeros(m, n);
        for kk in 0..self.rows {
            let a_row = self.row(kk);
            let b_row = b.row(kk);
            for i in 0..m {
                let a_ki = a_row[i];
                let out_row = out.row_mut(i);
                for j in 0..n {
                    out_row[j] += a_ki * b_row[j];
                }
            }
        }
        out.assert_finite("matmul_tn");
        out
    }
}

/// Gradients of `c = a.matmul(b)` given upstream `d_c`.
pub fn matmul_backward<S: Scalar>(
    a: &Matrix<S>,
    b: &Matrix<S>,
    d_c: &Matrix<S>,
) -> (Matrix<S>, Matrix<S>) {
    assert_eq!((d_c.rows(), d_c.cols()), (a.rows(), b.cols()), "matmul_backward shape");
    let d_a = d_c.matmul_nt(b); // dC · Bᵀ
    let d_b = a.matmul_tn(d_c); // Aᵀ · dC
    (d_a, d_b)
}

/// Row-wise numerically-stabilized softmax of `scale * x`.
pub fn softmax_rows<S: Scalar>(x: &Matrix<S>, scale: S) -> Matrix<S> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut max = S::from_f64(f64::NEG_INFINITY);
        for &v in row {
            max = max.maximum(v * scale);
        }
        let out_row = out.row_mut(r);
        let mut sum = S::ZERO;
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v * scale - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    out.assert_finite("softmax_rows");
    out
}

/// Backward of [`softmax_rows`]: given the forward output `y` and upstream
/// `d_y`, returns the gradient w.r.t. the pre-scale input.
pub fn softmax_rows_backward<S: Scalar>(y: &Matrix<S>, d_y: &Matrix<S>, scale: S) -> Matrix<S> {
    assert_eq!((y.rows(), y.cols()), (d_y.rows(), d_y.cols()), "softmax backward shape");
    let mut d_x = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = d_y.row(r);
        let mut dot = S::ZERO;
        for (yv, dv) in yr.iter().zip(dyr.iter()) {
            dot += *yv * *dv;
        }
        let out = d_x.row_mut(r);
        for ((o, yv), dv) in out.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *o = scale * *yv * (*dv - dot);
        }
    }
    d_x.assert_finite("softmax_rows_backward");
    d_x
}

/// Row-wise RMS normalization: each row divided by sqrt(mean sq + eps), then
/// scaled elementwise by `gain`.
pub fn rms_norm<S: Scalar>(x: &Matrix<S>, gain: &[S], eps: S) -> Matrix<S> {
    assert_eq!(gain.len(), x.cols(), "rms_norm gain length");
    let n = S::from_f64(x.cols() as f64);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut sumsq = S::ZERO;
        for &v in row {
            sumsq += v * v;
        }
        let inv = S::ONE / (sumsq / n + eps).sqrt();
        let out_row = out.row_mut(r);
        for ((o, &v), &g) in out_row.iter_mut().zip(row.iter()).zip(gain.iter()) {
            *o = v * inv * g;
        }
    }
    out.assert_finite("rms_norm");
    out
}

/// Backward of [`rms_norm`]. Returns `(d_x, d_gain)`.
pub fn rms_norm_backward<S: Scalar>(
    x: &Matrix<S>,
    gain: &[S],
    eps: S,
    d_y: &Matrix<S>,
) -> (Matrix<S>, Vec<S>) {
    assert_eq!((x.rows(), x.cols()), (d_y.rows(), d_y.cols()), "rms backward shape");
    let n = S::from_f64(x.cols() as f64);
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    let mut d_gain = vec![S::ZERO; x.cols()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let dyr = d_y.row(r);
        let mut sumsq = S::ZERO;
        for &v in row {
            sumsq += v * v;
        }
        let rms = (sumsq / n + eps).sqrt();
        let inv = S::ONE / rms;
        // sum_j dy_j * g_j * x_j
        let mut proj = S::ZERO;
        for ((&dv, &g), &xv) in dyr.iter().zip(gain.iter()).zip(row.iter()) {
            proj += dv * g * xv;
        }
        let inv3 = inv * inv * inv;
        let out = d_x.row_mut(r);
        for i in 0..row.len() {
            out[i] = dyr[i] * gain[i] * inv - row[i] * proj * inv3 / n;
            d_gain[i] += row[i] * inv * dyr[i];
        }
    }
    d_x.assert_finite("rms_norm_backward");
    (d_x, d_gain)
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    S::ONE / (S::ONE + (-v).exp())
}

/// Elementwise SiLU: `x * sigmoid(x)`.
pub fn silu<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    let out = Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data,
    };
    out.assert_finite("silu");
    out
}

/// Backward of [`silu`] w.r.t. its input.
pub fn silu_backward<S: Scalar>(x: &Matrix<S>, d_y: &Matrix<S>) -> Matrix<S> {
    assert_eq!((x.rows(), x.cols()), (d_y.rows(), d_y.cols()), "silu backward shape");
    let data = x
        .data()
        .iter()
        .zip(d_y.data().iter())
        .map(|(&v, &dv)| {
            let s = sigmoid(v);
            dv * s * (S::ONE + v * (S::ONE - s))
        })
        .collect();
    Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data,
    }
}

/// Gather rows of `table[V,H]` by token id.
pub fn embedding<S: Scalar>(table: &Matrix<S>, ids: &[TokenId]) -> Matrix<S> {
    let mut out = Matrix::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        assert!((id as usize) < table.rows(), "token id {id} out of vocab");
        out.row_mut(r).copy_from_slice(table.row(id as usize));
    }
    out
}

/// Scatter-add of `d_y` rows into a `[vocab, H]` gradient table.
pub fn embedding_backward<S: Scalar>(d_y: &Matrix<S>, ids: &[TokenId], vocab: usize) -> Matrix<S> {
    assert_eq!(d_y.rows(), ids.len(), "embedding backward rows");
    let mut d_table = Matrix::zeros(vocab, d_y.cols());
    for (r, &id) in ids.iter().enumerate() {
        let dst = d_table.row_mut(id as usize);
        for (d, &s) in dst.iter_mut().zip(d_y.row(r).iter()) {
            *d += s;
        }
    }
    d_table
}

/// Shifted cross-entropy pieces for one sequence, *unnormalized*: positions
/// `0..S-2` predict `labels[1..S-1]`, positions whose shifted label equals
/// `ignore_id` are skipped. Returns the loss sum, the number of contributing
/// positions, and the gradient of the *sum* w.r.t. `logits`.
pub fn cross_entropy_shifted_sum<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[TokenId],
    ignore_id: TokenId,
) -> Result<(S, usize, Matrix<S>), LossError> {
    let s = logits.rows();
    if s < 2 {
        return Err(LossError::SequenceTooShort(s));
    }
    assert_eq!(labels.len(), s, "labels length != sequence length");
    let v = logits.cols();
    let mut d_logits = Matrix::zeros(s, v);
    let mut loss_sum = S::ZERO;
    let mut count = 0usize;
    for pos in 0..s - 1 {
        let target = labels[pos + 1];
        if target == ignore_id {
            continue;
        }
        assert!((target as usize) < v, "label {target} out of vocab {v}");
        let row = logits.row(pos);
        let mut max = S::from_f64(f64::NEG_INFINITY);
        for &x in row {
            max = max.maximum(x);
        }
        let mut sum_exp = S::ZERO;
        for &x in row {
            sum_exp += (x - max).exp();
        }
        let lse = max + sum_exp.ln();
        loss_sum += lse - row[target as usize];
        count += 1;
        let d_row = d_logits.row_mut(pos);
        for (j, (&x, d)) in row.iter().zip(d_row.iter_mut()).enumerate() {
            let p = (x - max).exp() / sum_exp;
            *d = if j == target as usize { p - S::ONE } else { p };
        }
    }
    if count == 0 {
        return Err(LossError::EmptyLossSupport);
    }
    Ok((loss_sum, count, d_logits))
}

/// Mean shifted cross-entropy of one sequence and the exact gradient of that
/// mean w.r.t. `logits`.
pub fn cross_entropy_shifted<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[TokenId],
    ignore_id: TokenId,
) -> Result<(S, Matrix<S>), LossError> {
    let (sum, count, mut d_logits) = cross_entropy_shifted_sum(logits, labels, ignore_id)?;
    let inv = S::ONE / S::from_f64(count as f64);
    d_logits.scale_assign(inv);
    Ok((sum * inv, d_logits))
}

//! Shared multi-head attention core.
//!
//! One routine serves every batch row kind: full causal self-attention
//! (fine-tune and prefill rows, `q_len == kv_len`) and single-query cached
//! attention (decode rows, `q_len == 1` over the cache). Query row `i` may
//! attend to key positions `0..=offset+i` where `offset = kv_len - q_len`.
//! The softmax runs only over that valid prefix, so no sentinel infinities
//! ever enter a matrix.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Saved probabilities for backward, one `[q_len, kv_len]` matrix per head.
#[derive(Debug, Clone)]
pub struct AttnTrace<S> {
    pub probs: Vec<Matrix<S>>,
}

/// Multi-head scaled dot-product attention with a causal prefix mask.
/// `q` is `[q_len, hidden]`, `k`/`v` are `[kv_len, hidden]` with
/// `kv_len >= q_len`. Returns `[q_len, hidden]` plus the per-head
/// probabilities when `want_trace` is set.
pub fn causal_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    n_heads: usize,
    want_trace: bool,
) -> (Matrix<S>, Option<AttnTrace<S>>) {
    let hidden = q.cols();
    assert_eq!(k.cols(), hidden);
    assert_eq!(v.cols(), hidden);
    assert_eq!(k.rows(), v.rows());
    assert!(hidden % n_heads == 0, "hidden not divisible by heads");
    assert!(k.rows() >= q.rows(), "kv shorter than queries");
    let head_dim = hidden / n_heads;
    let offset = k.rows() - q.rows();
    let inv_sqrt = S::from_f64(1.0 / (head_dim as f64).sqrt());

    let mut out = Matrix::zeros(q.rows(), hidden);
    let mut trace = want_trace.then(|| AttnTrace {
        probs: Vec::with_capacity(n_heads),
    });

    for h in 0..n_heads {
        let base = h * head_dim;
        let mut probs = Matrix::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let valid = offset + i + 1;
            let q_row = &q.row(i)[base..base + head_dim];
            // Stable softmax over the causal prefix.
            let mut scores = vec![S::ZERO; valid];
            let mut max = S::from_f64(f64::NEG_INFINITY);
            for (j, score) in scores.iter_mut().enumerate() {
                let k_row = &k.row(j)[base..base + head_dim];
                let mut dot = S::ZERO;
                for d in 0..head_dim {
                    dot += q_row[d] * k_row[d];
                }
                *score = dot * inv_sqrt;
                max = max.maximum(*score);
            }
            let mut denom = S::ZERO;
            for score in scores.iter_mut() {
                *score = (*score - max).exp();
                denom += *score;
            }
            let probs_row = probs.row_mut(i);
            for (j, &e) in scores.iter().enumerate() {
                probs_row[j] = e / denom;
            }
            let out_row = out.row_mut(i);
            for j in 0..valid {
                let p = probs_row[j];
                let v_row = &v.row(j)[base..base + head_dim];
                for d in 0..head_dim {
                    out_row[base + d] += p * v_row[d];
                }
            }
        }
        if let Some(t) = trace.as_mut() {
            t.probs.push(probs);
        }
    }
    out.assert_finite("attention output");
    (out, trace)
}

/// Backward of [`causal_attention`]. Needs the rotated `q`/`k`, raw `v`, and
/// the saved probabilities. Returns `(d_q, d_k, d_v)` in the same layouts.
pub fn causal_attention_backward<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    trace: &AttnTrace<S>,
    d_out: &Matrix<S>,
    n_heads: usize,
) -> (Matrix<S>, Matrix<S>, Matrix<S>) {
    let hidden = q.cols();
    let head_dim = hidden / n_heads;
    let offset = k.rows() - q.rows();
    let inv_sqrt = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut d_q = Matrix::zeros(q.rows(), hidden);
    let mut d_k = Matrix::zeros(k.rows(), hidden);
    let mut d_v = Matrix::zeros(v.rows(), hidden);

    for h in 0..n_heads {
        let base = h * head_dim;
        let probs = &trace.probs[h];
        for i in 0..q.rows() {
            let valid = offset + i + 1;
            let d_out_row = &d_out.row(i)[base..base + head_dim];
            let probs_row = probs.row(i);
            // d_probs[j] = <d_out, v_j>; d_v_j += p_j * d_out
            let mut d_probs = vec![S::ZERO; valid];
            for j in 0..valid {
                let v_row = &v.row(j)[base..base + head_dim];
                let mut dot = S::ZERO;
                for d in 0..head_dim {
                    dot += d_out_row[d] * v_row[d];
                }
                d_probs[j] = dot;
                let p = probs_row[j];
                let d_v_row = d_v.row_mut(j);
                for d in 0..head_dim {
                    d_v_row[base + d] += p * d_out_row[d];
                }
            }
            // Softmax backward within the valid prefix.
            let mut inner = S::ZERO;
            for j in 0..valid {
                inner += probs_row[j] * d_probs[j];
            }
            for (j, d_p) in d_probs.iter().enumerate() {
                let d_score = probs_row[j] * (*d_p - inner) * inv_sqrt;
                let q_row = &q.row(i)[base..base + head_dim];
                let k_row = &k.row(j)[base..base + head_dim];
                let d_q_row = d_q.row_mut(i);
                for d in 0..head_dim {
                    d_q_row[base + d] += d_score * k_row[d];
                }
                let d_k_row = d_k.row_mut(j);
                for d in 0..head_dim {
                    d_k_row[base + d] += d_score * q_row[d];
                }
            }
        }
    }
    (d_q, d_k, d_v)
}

//! Rotary position embedding with the half-split pairing convention:
//! dimension `i` pairs with `i + head_dim/2` inside each head.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Precomputed cos/sin tables, `[max_seq, head_dim/2]` each. Angles are
/// computed in f64 and cast once so f32 and f64 runs share the same table
/// construction path.
#[derive(Debug, Clone)]
pub struct RopeTable<S> {
    cos: Matrix<S>,
    sin: Matrix<S>,
    n_heads: usize,
    head_dim: usize,
}

impl<S: Scalar> RopeTable<S> {
    pub fn new(max_seq: usize, n_heads: usize, head_dim: usize, theta: f64) -> Self {
        assert!(head_dim % 2 == 0, "head_dim must be even");
        let half = head_dim / 2;
        let mut cos = Matrix::zeros(max_seq, half);
        let mut sin = Matrix::zeros(max_seq, half);
        for pos in 0..max_seq {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.set(pos, i, S::from_f64(angle.cos()));
                sin.set(pos, i, S::from_f64(angle.sin()));
            }
        }
        RopeTable {
            cos,
            sin,
            n_heads,
            head_dim,
        }
    }

    pub fn max_seq(&self) -> usize {
        self.cos.rows()
    }

    /// Rotate every head of every row of `x` (`[rows, n_heads*head_dim]`) by
    /// its position from `positions`.
    pub fn apply(&self, x: &mut Matrix<S>, positions: &[usize]) {
        self.rotate(x, positions, false);
    }

    /// Gradient of [`RopeTable::apply`]: the inverse rotation (negated sin).
    pub fn apply_backward(&self, d_x: &mut Matrix<S>, positions: &[usize]) {
        self.rotate(d_x, positions, true);
    }

    fn rotate(&self, x: &mut Matrix<S>, positions: &[usize], invert: bool) {
        assert_eq!(x.rows(), positions.len(), "one position per row");
        assert_eq!(x.cols(), self.n_heads * self.head_dim, "row width mismatch");
        let half = self.head_dim / 2;
        for (r, &pos) in positions.iter().enumerate() {
            assert!(pos < self.cos.rows(), "position {pos} exceeds rope table");
            let row = x.row_mut(r);
            for h in 0..self.n_heads {
                let base = h * self.head_dim;
                for i in 0..half {
                    let c = self.cos.get(pos, i);
                    let s = if invert {
                        -self.sin.get(pos, i)
                    } else {
                        self.sin.get(pos, i)
                    };
                    let a = row[base + i];
                    let b = row[base + half + i];
                    row[base + i] = a * c - b * s;
                    row[base + half + i] = a * s + b * c;
                }
            }
        }
    }
}

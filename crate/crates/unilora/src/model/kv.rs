//! Per-request key/value cache.
//!
//! One cache per in-flight decode request, one `[len, hidden]` key matrix and
//! one value matrix per layer. Keys are stored after rotary rotation; values
//! are stored raw. Single writer per request: the runtime never shares a
//! cache between batch rows.

use crate::model::ModelError;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct KvCache<S> {
    keys: Vec<Matrix<S>>,
    values: Vec<Matrix<S>>,
    max_seq: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layers: usize, hidden: usize, max_seq: usize) -> Self {
        KvCache {
            keys: (0..n_layers).map(|_| Matrix::zeros(0, hidden)).collect(),
            values: (0..n_layers).map(|_| Matrix::zeros(0, hidden)).collect(),
            max_seq,
        }
    }

    /// Cached positions (uniform across layers).
    pub fn len(&self) -> usize {
        self.keys[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &Matrix<S> {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Matrix<S> {
        &self.values[layer]
    }

    /// Append one position's k/v rows to a layer. Layers must be appended in
    /// order within a step so lengths stay uniform.
    pub fn append(&mut self, layer: usize, k_row: &[S], v_row: &[S]) -> Result<(), ModelError> {
        if layer == 0 && self.keys[0].rows() == self.max_seq {
            return Err(ModelError::CacheFull(self.max_seq));
        }
        self.keys[layer].push_row(k_row);
        self.values[layer].push_row(v_row);
        Ok(())
    }

    /// Parameter bytes currently held.
    pub fn byte_size(&self) -> usize {
        let elem = S::DTYPE.size_bytes();
        self.keys
            .iter()
            .zip(self.values.iter())
            .map(|(k, v)| (k.len() + v.len()) * elem)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_grows_uniformly_and_overflows_cleanly() {
        let mut cache = KvCache::<f64>::new(2, 4, 3);
        assert!(cache.is_empty());
        for step in 0..3 {
            for layer in 0..2 {
                cache
                    .append(layer, &[step as f64; 4], &[1.0; 4])
                    .unwrap();
            }
            assert_eq!(cache.len(), step + 1);
        }
        assert!(matches!(
            cache.append(0, &[0.0; 4], &[0.0; 4]),
            Err(ModelError::CacheFull(3))
        ));
        assert_eq!(cache.byte_size(), 2 * 2 * 3 * 4 * 8);
    }
}

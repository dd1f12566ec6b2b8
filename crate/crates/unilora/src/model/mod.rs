//! Toy causal decoder: pre-norm RMSNorm, multi-head attention with rotary
//! positions, SwiGLU MLP, untied LM head, no biases.
//!
//! Weights live in plain row-major matrices in `[out, in]` layout so every
//! projection is `x·Wᵀ`. The solo inference paths (full forward, prefill,
//! one-token decode) live in [`forward`]; the batched mixed-kind path builds
//! on the same kernels from the flow module.

pub mod attention;
pub mod forward;
pub mod kv;
pub mod rope;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerError, TensorContainer};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {got} exceeds max_seq {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("sequence must have at least {min} tokens, got {got}")]
    SequenceTooShort { got: usize, min: usize },
    #[error("token id {0} out of vocabulary range {1}")]
    TokenOutOfRange(u32, usize),
    #[error("prefill requires an empty cache, found {0} cached positions")]
    CacheNotEmpty(usize),
    #[error("decode requires a non-empty cache")]
    CacheEmpty,
    #[error("cache is full at max_seq {0}")]
    CacheFull(usize),
    #[error("weight file: {0}")]
    Container(#[from] ContainerError),
    #[error("weight file metadata: {0}")]
    Metadata(String),
}

/// Model shape. `hidden` must equal `n_heads * head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: small enough that every acceptance check runs on
    /// one CPU core in seconds.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: 256,
            hidden: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            mlp_hidden: 128,
            max_seq: 512,
            rope_theta: 10_000.0,
            rms_eps: 1e-6,
        }
    }

    /// Minimal config for gradient-check and equivalence tests.
    pub fn test_tiny(hidden: usize, n_layers: usize) -> Self {
        assert!(hidden % 2 == 0 && hidden >= 4);
        let n_heads = 2;
        ModelConfig {
            vocab_size: 64,
            hidden,
            n_layers,
            n_heads,
            head_dim: hidden / n_heads,
            mlp_hidden: hidden * 2,
            max_seq: 64,
            rope_theta: 10_000.0,
            rms_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden != self.n_heads * self.head_dim {
            return Err(ModelError::InvalidConfig(format!(
                "hidden {} != n_heads {} * head_dim {}",
                self.hidden, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim
            )));
        }
        if self.vocab_size < 2 || self.max_seq < 2 || self.n_layers == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::InvalidConfig(
                "vocab_size/max_seq/n_layers/mlp_hidden too small".into(),
            ));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0)
            || !(self.rms_eps.is_finite() && self.rms_eps > 0.0)
        {
            return Err(ModelError::InvalidConfig(
                "rope_theta and rms_eps must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn content_hash(&self) -> u64 {
        crate::fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// One decoder layer's dense weights, all `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S> {
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub w_up: Matrix<S>,
    pub w_gate: Matrix<S>,
    pub w_down: Matrix<S>,
    pub attn_norm: Vec<S>,
    pub mlp_norm: Vec<S>,
}

/// Full frozen base model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights<S> {
    pub config: ModelConfig,
    pub embedding: Matrix<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm: Vec<S>,
    pub lm_head: Matrix<S>,
}

fn gaussian_matrix<S: Scalar>(rows: usize, cols: usize, sigma: f64, rng: &mut SeededRng) -> Matrix<S> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| S::from_f64(rng.next_gaussian() * sigma))
            .collect(),
    )
}

impl<S: Scalar> BaseWeights<S> {
    /// Seeded Gaussian initialization (sigma 0.02), norm gains at 1.
    pub fn init_seeded(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let h = config.hidden;
        let m = config.mlp_hidden;
        let sigma = 0.02;
        let embedding = gaussian_matrix(config.vocab_size, h, sigma, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: gaussian_matrix(h, h, sigma, &mut rng),
                wk: gaussian_matrix(h, h, sigma, &mut rng),
                wv: gaussian_matrix(h, h, sigma, &mut rng),
                wo: gaussian_matrix(h, h, sigma, &mut rng),
                w_up: gaussian_matrix(m, h, sigma, &mut rng),
                w_gate: gaussian_matrix(m, h, sigma, &mut rng),
                w_down: gaussian_matrix(h, m, sigma, &mut rng),
                attn_norm: vec![S::ONE; h],
                mlp_norm: vec![S::ONE; h],
            });
        }
        let final_norm = vec![S::ONE; h];
        let lm_head = gaussian_matrix(config.vocab_size, h, sigma, &mut rng);
        Ok(BaseWeights {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Dense weight matrix for a projection, used to bind adapter segments.
    pub fn linear(&self, layer: usize, target: crate::lora::TargetLinear) -> &Matrix<S> {
        use crate::lora::TargetLinear as T;
        let lw = &self.layers[layer];
        match target {
            T::Q => &lw.wq,
            T::K => &lw.wk,
            T::V => &lw.wv,
            T::O => &lw.wo,
            T::Up => &lw.w_up,
            T::Gate => &lw.w_gate,
            T::Down => &lw.w_down,
        }
    }

    pub fn byte_size(&self) -> usize {
        let elem = S::DTYPE.size_bytes();
        let mut count = self.embedding.len() + self.lm_head.len() + self.final_norm.len();
        for lw in &self.layers {
            count += lw.wq.len()
                + lw.wk.len()
                + lw.wv.len()
                + lw.wo.len()
                + lw.w_up.len()
                + lw.w_gate.len()
                + lw.w_down.len()
                + lw.attn_norm.len()
                + lw.mlp_norm.len();
        }
        count * elem
    }

    /// FNV-1a over every tensor's little-endian bytes in manifest order.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        fn push<S: Scalar>(bytes: &mut Vec<u8>, m: &Matrix<S>) {
            for &v in m.data() {
                v.write_le(bytes);
            }
        }
        push(&mut bytes, &self.embedding);
        for lw in &self.layers {
            push(&mut bytes, &lw.wq);
            push(&mut bytes, &lw.wk);
            push(&mut bytes, &lw.wv);
            push(&mut bytes, &lw.wo);
            push(&mut bytes, &lw.w_up);
            push(&mut bytes, &lw.w_gate);
            push(&mut bytes, &lw.w_down);
            for &v in &lw.attn_norm {
                v.write_le(&mut bytes);
            }
            for &v in &lw.mlp_norm {
                v.write_le(&mut bytes);
            }
        }
        for &v in &self.final_norm {
            v.write_le(&mut bytes);
        }
        push(&mut bytes, &self.lm_head);
        crate::fnv1a64(&bytes)
    }

    pub fn to_container(&self) -> TensorContainer<S> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        let mut c = TensorContainer::with_metadata(meta);
        c.insert("embedding", self.embedding.clone());
        for (l, lw) in self.layers.iter().enumerate() {
            c.insert(format!("layers.{l}.wq"), lw.wq.clone());
            c.insert(format!("layers.{l}.wk"), lw.wk.clone());
            c.insert(format!("layers.{l}.wv"), lw.wv.clone());
            c.insert(format!("layers.{l}.wo"), lw.wo.clone());
            c.insert(format!("layers.{l}.w_up"), lw.w_up.clone());
            c.insert(format!("layers.{l}.w_gate"), lw.w_gate.clone());
            c.insert(format!("layers.{l}.w_down"), lw.w_down.clone());
            c.insert(
                format!("layers.{l}.attn_norm"),
                Matrix::from_vec(1, lw.attn_norm.len(), lw.attn_norm.clone()),
            );
            c.insert(
                format!("layers.{l}.mlp_norm"),
                Matrix::from_vec(1, lw.mlp_norm.len(), lw.mlp_norm.clone()),
            );
        }
        c.insert(
            "final_norm",
            Matrix::from_vec(1, self.final_norm.len(), self.final_norm.clone()),
        );
        c.insert("lm_head", self.lm_head.clone());
        c
    }

    pub fn from_container(mut c: TensorContainer<S>) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_str(c.metadata())
            .map_err(|e| ModelError::Metadata(e.to_string()))?;
        config.validate()?;
        let mut take = |name: String| {
            c.take(&name)
                .ok_or_else(|| ModelError::Metadata(format!("missing tensor {name:?}")))
        };
        let embedding = take("embedding".into())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: take(format!("layers.{l}.wq"))?,
                wk: take(format!("layers.{l}.wk"))?,
                wv: take(format!("layers.{l}.wv"))?,
                wo: take(format!("layers.{l}.wo"))?,
                w_up: take(format!("layers.{l}.w_up"))?,
                w_gate: take(format!("layers.{l}.w_gate"))?,
                w_down: take(format!("layers.{l}.w_down"))?,
                attn_norm: take(format!("layers.{l}.attn_norm"))?.data().to_vec(),
                mlp_norm: take(format!("layers.{l}.mlp_norm"))?.data().to_vec(),
            });
        }
        let final_norm = take("final_norm".into())?.data().to_vec();
        let lm_head = take("lm_head".into())?;
        Ok(BaseWeights {
            config,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        assert!(ModelConfig::desk_default().validate().is_ok());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = ModelConfig::desk_default();
        c.head_dim = 15;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_default();
        c.hidden = 63;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_default();
        c.rms_eps = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = ModelConfig::test_tiny(8, 2);
        let w1 = BaseWeights::<f64>::init_seeded(c, 7).unwrap();
        let w2 = BaseWeights::<f64>::init_seeded(c, 7).unwrap();
        let w3 = BaseWeights::<f64>::init_seeded(c, 8).unwrap();
        assert_eq!(w1.content_hash(), w2.content_hash());
        assert_ne!(w1.content_hash(), w3.content_hash());
    }

    #[test]
    fn init_moments_match_sigma() {
        let c = ModelConfig::desk_default();
        let w = BaseWeights::<f64>::init_seeded(c, 11).unwrap();
        let data = w.embedding.data();
        let n = data.len() as f64;
        let mean: f64 = data.iter().sum::<f64>() / n;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 2e-3, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 2e-3, "sd {}", var.sqrt());
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let c = ModelConfig::test_tiny(8, 2);
        let w = BaseWeights::<f32>::init_seeded(c, 3).unwrap();
        let bytes = w.to_container().to_bytes();
        let back =
            BaseWeights::<f32>::from_container(TensorContainer::from_bytes(&bytes).unwrap())
                .unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_container().to_bytes(), bytes);
    }

    #[test]
    fn byte_size_matches_desk_accounting() {
        let c = ModelConfig::desk_default();
        let w = BaseWeights::<f64>::init_seeded(c, 1).unwrap();
        let per_layer = 4 * 64 * 64 + 2 * 128 * 64 + 64 * 128 + 2 * 64;
        let expected = (256 * 64 + 4 * per_layer + 64 + 256 * 64) * 8;
        assert_eq!(w.byte_size(), expected);
    }
}

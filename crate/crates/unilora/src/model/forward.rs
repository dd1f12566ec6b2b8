//! Solo execution paths: full no-cache forward, cache-building prefill, and
//! one-token decode. These run a single sequence against the base model plus
//! at most one adapter, and exist both as the serving fast path and as the
//! reference the mixed-batch flow is checked against.

use crate::lora::{segmented_forward, LoraAdapter, SegmentMap, TargetLinear};
use crate::model::attention::causal_attention;
use crate::model::kv::KvCache;
use crate::model::rope::RopeTable;
use crate::model::{BaseWeights, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{embedding, rms_norm, silu, Matrix, TokenId};

/// A base model bound to at most one adapter, with the request's dynamic
/// scaling factor. No weights are copied; views are made per call.
#[derive(Clone, Copy)]
pub struct ModelView<'a, S> {
    pub base: &'a BaseWeights<S>,
    pub adapter: Option<&'a LoraAdapter<S>>,
    pub dynamic_scale: f64,
}

impl<'a, S: Scalar> ModelView<'a, S> {
    pub fn base_only(base: &'a BaseWeights<S>) -> Self {
        ModelView {
            base,
            adapter: None,
            dynamic_scale: 1.0,
        }
    }

    pub fn with_adapter(base: &'a BaseWeights<S>, adapter: &'a LoraAdapter<S>) -> Self {
        ModelView {
            base,
            adapter: Some(adapter),
            dynamic_scale: 1.0,
        }
    }

    fn adapters(&self) -> Vec<&'a LoraAdapter<S>> {
        self.adapter.into_iter().collect()
    }

    fn seg(&self, rows: usize) -> SegmentMap {
        let slot = self.adapter.map(|_| 0);
        SegmentMap::single(rows, slot, self.dynamic_scale)
    }

    fn project(&self, x: &Matrix<S>, layer: usize, target: TargetLinear) -> Matrix<S> {
        segmented_forward(
            x,
            self.base.linear(layer, target),
            &self.seg(x.rows()),
            &self.adapters(),
            layer,
            target,
            None,
        )
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        let cfg = &self.base.config;
        if tokens.is_empty() {
            return Err(ModelError::SequenceTooShort { got: 0, min: 1 });
        }
        if tokens.len() > cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                got: tokens.len(),
                max: cfg.max_seq,
            });
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange(t, cfg.vocab_size));
            }
        }
        Ok(())
    }

    /// One decoder layer over a single contiguous sequence starting at
    /// position `pos0`. Appends this span's k/v rows to `cache` when given.
    fn layer_forward(
        &self,
        layer: usize,
        x: &mut Matrix<S>,
        positions: &[usize],
        rope: &RopeTable<S>,
        mut cache: Option<&mut KvCache<S>>,
    ) -> Result<(), ModelError> {
        let cfg = &self.base.config;
        let lw = &self.base.layers[layer];

        let h_norm = rms_norm(x, &lw.attn_norm, S::from_f64(cfg.rms_eps));
        let mut q = self.project(&h_norm, layer, TargetLinear::Q);
        let mut k = self.project(&h_norm, layer, TargetLinear::K);
        let v = self.project(&h_norm, layer, TargetLinear::V);
        rope.apply(&mut q, positions);
        rope.apply(&mut k, positions);

        let (attn, cached_len) = match cache.as_deref_mut() {
            Some(c) => {
                for r in 0..k.rows() {
                    c.append(layer, k.row(r), v.row(r))?;
                }
                let len = c.keys(layer).rows();
                (
                    causal_attention(&q, c.keys(layer), c.values(layer), cfg.n_heads, false).0,
                    len,
                )
            }
            None => (causal_attention(&q, &k, &v, cfg.n_heads, false).0, k.rows()),
        };
        debug_assert!(cached_len >= q.rows());
        let o = self.project(&attn, layer, TargetLinear::O);
        x.add_assign(&o);

        let m_norm = rms_norm(x, &lw.mlp_norm, S::from_f64(cfg.rms_eps));
        let up = self.project(&m_norm, layer, TargetLinear::Up);
        let gate = self.project(&m_norm, layer, TargetLinear::Gate);
        let act = silu(&gate).hadamard(&up);
        let down = self.project(&act, layer, TargetLinear::Down);
        x.add_assign(&down);
        Ok(())
    }

    fn head(&self, x: &Matrix<S>) -> Matrix<S> {
        let cfg = &self.base.config;
        let final_h = rms_norm(x, &self.base.final_norm, S::from_f64(cfg.rms_eps));
        final_h.matmul_nt(&self.base.lm_head)
    }

    /// Full forward without a cache: logits for every position, `[S, V]`.
    pub fn forward_full(
        &self,
        tokens: &[TokenId],
        rope: &RopeTable<S>,
    ) -> Result<Matrix<S>, ModelError> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = embedding(&self.base.embedding, tokens);
        for layer in 0..self.base.config.n_layers {
            self.layer_forward(layer, &mut x, &positions, rope, None)?;
        }
        Ok(self.head(&x))
    }

    /// Prompt pass that fills `cache` and returns the last position's logits
    /// as `[1, V]`. The cache must be empty.
    pub fn prefill(
        &self,
        tokens: &[TokenId],
        rope: &RopeTable<S>,
        cache: &mut KvCache<S>,
    ) -> Result<Matrix<S>, ModelError> {
        self.check_tokens(tokens)?;
        if !cache.is_empty() {
            return Err(ModelError::CacheNotEmpty(cache.len()));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = embedding(&self.base.embedding, tokens);
        for layer in 0..self.base.config.n_layers {
            self.layer_forward(layer, &mut x, &positions, rope, Some(cache))?;
        }
        Ok(self.head(&x.slice_rows(x.rows() - 1, 1)))
    }

    /// One decode step: run `token` at position `cache.len()`, append its k/v
    /// rows, and return that position's logits as `[1, V]`.
    pub fn decode_step(
        &self,
        token: TokenId,
        rope: &RopeTable<S>,
        cache: &mut KvCache<S>,
    ) -> Result<Matrix<S>, ModelError> {
        let cfg = &self.base.config;
        if cache.is_empty() {
            return Err(ModelError::CacheEmpty);
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange(token, cfg.vocab_size));
        }
        let pos = cache.len();
        if pos >= cfg.max_seq {
            return Err(ModelError::CacheFull(cfg.max_seq));
        }
        let positions = [pos];
        let mut x = embedding(&self.base.embedding, &[token]);
        for layer in 0..cfg.n_layers {
            self.layer_forward(layer, &mut x, &positions, rope, Some(cache))?;
        }
        Ok(self.head(&x))
    }

    /// Greedy generation: prefill the prompt, then decode `n_new` tokens,
    /// always picking the arg-max logit. Returns only the generated tokens.
    pub fn generate_greedy(
        &self,
        prompt: &[TokenId],
        n_new: usize,
        rope: &RopeTable<S>,
    ) -> Result<Vec<TokenId>, ModelError> {
        let cfg = &self.base.config;
        let mut cache = KvCache::new(cfg.n_layers, cfg.hidden, cfg.max_seq);
        let logits = self.prefill(prompt, rope, &mut cache)?;
        let mut out = Vec::with_capacity(n_new);
        let mut next = greedy_pick(&logits, 0);
        for _ in 0..n_new {
            out.push(next);
            if out.len() == n_new || cache.len() >= cfg.max_seq {
                break;
            }
            let logits = self.decode_step(next, rope, &mut cache)?;
            next = greedy_pick(&logits, 0);
        }
        Ok(out)
    }
}

/// Arg-max over one logits row; ties resolve to the lowest token id.
pub fn greedy_pick<S: Scalar>(logits: &Matrix<S>, row: usize) -> TokenId {
    let r = logits.row(row);
    let mut best = 0usize;
    for (j, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = j;
        }
    }
    best as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SeededRng;

    fn tiny_setup(seed: u64) -> (BaseWeights<f64>, RopeTable<f64>) {
        let cfg = ModelConfig::test_tiny(8, 2);
        let base = BaseWeights::init_seeded(cfg, seed).unwrap();
        let rope = RopeTable::new(cfg.max_seq, cfg.n_heads, cfg.head_dim, cfg.rope_theta);
        (base, rope)
    }

    #[test]
    fn forward_shapes_and_validation() {
        let (base, rope) = tiny_setup(1);
        let view = ModelView::base_only(&base);
        let logits = view.forward_full(&[1, 2, 3], &rope).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (3, 64));
        assert!(matches!(
            view.forward_full(&[], &rope),
            Err(ModelError::SequenceTooShort { .. })
        ));
        assert!(matches!(
            view.forward_full(&[999], &rope),
            Err(ModelError::TokenOutOfRange(999, _))
        ));
        let too_long = vec![0u32; base.config.max_seq + 1];
        assert!(matches!(
            view.forward_full(&too_long, &rope),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn prefill_matches_forward_full_last_row() {
        let (base, rope) = tiny_setup(2);
        let view = ModelView::base_only(&base);
        let tokens = [5u32, 9, 14, 3];
        let full = view.forward_full(&tokens, &rope).unwrap();
        let mut cache = KvCache::new(2, 8, base.config.max_seq);
        let last = view.prefill(&tokens, &rope, &mut cache).unwrap();
        assert_eq!(cache.len(), 4);
        assert!(full.slice_rows(3, 1).max_abs_diff(&last) <= 1e-12);
    }

    #[test]
    fn prefill_requires_empty_cache_and_decode_nonempty() {
        let (base, rope) = tiny_setup(3);
        let view = ModelView::base_only(&base);
        let mut cache = KvCache::new(2, 8, base.config.max_seq);
        view.prefill(&[1, 2], &rope, &mut cache).unwrap();
        assert!(matches!(
            view.prefill(&[1, 2], &rope, &mut cache),
            Err(ModelError::CacheNotEmpty(2))
        ));
        let mut empty = KvCache::new(2, 8, base.config.max_seq);
        assert!(matches!(
            view.decode_step(1, &rope, &mut empty),
            Err(ModelError::CacheEmpty)
        ));
    }

    #[test]
    fn decode_steps_match_forward_full_rows() {
        let (base, rope) = tiny_setup(4);
        let view = ModelView::base_only(&base);
        let prompt = [7u32, 2, 11];
        let continuation = [4u32, 19, 8, 1];
        let mut all: Vec<u32> = prompt.to_vec();
        all.extend_from_slice(&continuation);
        let full = view.forward_full(&all, &rope).unwrap();

        let mut cache = KvCache::new(2, 8, base.config.max_seq);
        let pre = view.prefill(&prompt, &rope, &mut cache).unwrap();
        assert!(full.slice_rows(2, 1).max_abs_diff(&pre) <= 1e-12);
        for (i, &tok) in continuation.iter().enumerate() {
            let step = view.decode_step(tok, &rope, &mut cache).unwrap();
            let pos = prompt.len() + i;
            assert!(
                full.slice_rows(pos, 1).max_abs_diff(&step) <= 1e-12,
                "decode step {i} diverged"
            );
        }
        assert_eq!(cache.len(), all.len());
    }

    #[test]
    fn adapter_changes_outputs_and_zero_b_does_not() {
        let (base, rope) = tiny_setup(5);
        let cfg = base.config;
        let mut rng = SeededRng::new(10);
        let mut adapter = LoraAdapter::<f64>::init_finetune(
            "a",
            2,
            4.0,
            0.0,
            &TargetLinear::ALL,
            cfg.n_layers,
            cfg.hidden,
            cfg.mlp_hidden,
            &mut rng,
        );
        let tokens = [1u32, 2, 3];
        let base_logits = ModelView::base_only(&base)
            .forward_full(&tokens, &rope)
            .unwrap();
        // Fresh adapter: b is zero, delta is exactly zero.
        let with_fresh = ModelView::with_adapter(&base, &adapter)
            .forward_full(&tokens, &rope)
            .unwrap();
        assert_eq!(base_logits, with_fresh);
        // Perturb one b and outputs must move.
        let pair = adapter.pair_mut(0, TargetLinear::Q).unwrap();
        pair.b.set(0, 0, 0.5);
        let with_live = ModelView::with_adapter(&base, &adapter)
            .forward_full(&tokens, &rope)
            .unwrap();
        assert!(base_logits.max_abs_diff(&with_live) > 0.0);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let (base, rope) = tiny_setup(6);
        let view = ModelView::base_only(&base);
        let a = view.generate_greedy(&[1, 2, 3], 6, &rope).unwrap();
        let b = view.generate_greedy(&[1, 2, 3], 6, &rope).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn greedy_pick_breaks_ties_low() {
        let logits = Matrix::<f64>::from_f64_slice(1, 4, &[0.5, 2.0, 2.0, 1.0]);
        assert_eq!(greedy_pick(&logits, 0), 1);
    }
}

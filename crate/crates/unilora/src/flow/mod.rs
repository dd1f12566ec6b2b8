//! Unified mixed-kind batching: fine-tune, eval, prefill, and decode rows
//! packed into one matrix and pushed through the decoder stack together.
//!
//! Rows are ordered fine-tune, eval, prefill, decode; each job owns one
//! contiguous row range bound to at most one adapter segment. Dense
//! projections and the LM head run jointly over all rows via the segmented
//! kernel; only attention branches per job, because each row kind attends
//! over a different span (own sequence vs. a KV cache). The backward pass
//! touches only the fine-tune prefix and only adapter parameters.

use thiserror::Error;

use crate::lora::{
    segmented_backward, segmented_forward, AdapterGradSet, DropoutPlan, LoraAdapter, LoraError,
    Segment, SegmentMap, TargetLinear,
};
use crate::model::attention::{causal_attention, causal_attention_backward, AttnTrace};
use crate::model::kv::KvCache;
use crate::model::rope::RopeTable;
use crate::model::{BaseWeights, ModelError};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{
    cross_entropy_shifted_sum, embedding, rms_norm, rms_norm_backward, silu, silu_backward,
    LossError, Matrix, TokenId,
};

/// Batch row kinds, in packing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowKind {
    Finetune,
    Eval,
    Prefill,
    Decode,
}

impl RowKind {
    fn rank(self) -> u8 {
        match self {
            RowKind::Finetune => 0,
            RowKind::Eval => 1,
            RowKind::Prefill => 2,
            RowKind::Decode => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("batch has no jobs")]
    EmptyBatch,
    #[error("adapter slot {slot} is trained by more than one fine-tune job in one batch")]
    AmbiguousAdapterOwnership { slot: usize },
    #[error("fine-tune job {tag} has no adapter slot")]
    FinetuneNeedsAdapter { tag: u64 },
    #[error("job {tag}: needs at least {min} tokens, got {got}")]
    JobTooShort { tag: u64, got: usize, min: usize },
    #[error("job {tag}: labels length {labels} != tokens length {tokens}")]
    LabelMismatch { tag: u64, labels: usize, tokens: usize },
    #[error("job {tag}: missing KV cache binding")]
    MissingCache { tag: u64 },
    #[error("job {tag}: cache index {idx} out of range {len}")]
    CacheOutOfRange { tag: u64, idx: usize, len: usize },
    #[error("expected {expected} fine-tune rngs, got {got}")]
    RngCount { expected: usize, got: usize },
    #[error("batch has no trace; fine-tune rows require a traced forward")]
    MissingTrace,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// One job before packing.
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub tag: u64,
    pub kind: RowKind,
    pub tokens: Vec<TokenId>,
    /// Label row per token for fine-tune/eval jobs; `None` means the tokens
    /// label themselves (plain causal LM).
    pub labels: Option<Vec<TokenId>>,
    pub slot: Option<usize>,
    pub scale: f64,
    pub cache_idx: Option<usize>,
}

impl JobSpec {
    pub fn finetune(tag: u64, tokens: Vec<TokenId>, slot: usize) -> Self {
        JobSpec {
            tag,
            kind: RowKind::Finetune,
            tokens,
            labels: None,
            slot: Some(slot),
            scale: 1.0,
            cache_idx: None,
        }
    }

    pub fn eval(tag: u64, tokens: Vec<TokenId>, slot: Option<usize>) -> Self {
        JobSpec {
            tag,
            kind: RowKind::Eval,
            tokens,
            labels: None,
            slot,
            scale: 1.0,
            cache_idx: None,
        }
    }

    pub fn prefill(tag: u64, tokens: Vec<TokenId>, slot: Option<usize>, cache_idx: usize) -> Self {
        JobSpec {
            tag,
            kind: RowKind::Prefill,
            tokens,
            labels: None,
            slot,
            scale: 1.0,
            cache_idx: Some(cache_idx),
        }
    }

    pub fn decode(tag: u64, token: TokenId, slot: Option<usize>, cache_idx: usize) -> Self {
        JobSpec {
            tag,
            kind: RowKind::Decode,
            tokens: vec![token],
            labels: None,
            slot,
            cache_idx: Some(cache_idx),
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_labels(mut self, labels: Vec<TokenId>) -> Self {
        self.labels = Some(labels);
        self
    }
}

/// A job with its packed row range.
#[derive(Debug, Clone)]
pub struct PlacedJob {
    pub spec: JobSpec,
    pub row_start: usize,
    pub row_count: usize,
}

/// Packed batch: jobs in kind order, one segment per job.
#[derive(Debug, Clone)]
pub struct UnifiedBatch {
    jobs: Vec<PlacedJob>,
    tokens: Vec<TokenId>,
    seg: SegmentMap,
    f_jobs: usize,
    f_rows: usize,
}

impl UnifiedBatch {
    pub fn jobs(&self) -> &[PlacedJob] {
        &self.jobs
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn seg(&self) -> &SegmentMap {
        &self.seg
    }

    pub fn total_rows(&self) -> usize {
        self.tokens.len()
    }

    /// Jobs and rows in the fine-tune prefix.
    pub fn finetune_span(&self) -> (usize, usize) {
        (self.f_jobs, self.f_rows)
    }
}

/// Order jobs fine-tune, eval, prefill, decode (stable within kind), pack
/// their token rows, and bind one adapter segment per job.
pub fn assemble_batch(mut jobs: Vec<JobSpec>) -> Result<UnifiedBatch, FlowError> {
    if jobs.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    jobs.sort_by_key(|j| j.kind.rank());
    let mut seen_f_slots: Vec<usize> = Vec::new();
    let mut placed = Vec::with_capacity(jobs.len());
    let mut tokens = Vec::new();
    let mut segments = Vec::with_capacity(jobs.len());
    let mut f_jobs = 0;
    let mut f_rows = 0;
    for spec in jobs {
        crate::lora::validate_dynamic_scale(spec.scale)?;
        let min = match spec.kind {
            RowKind::Finetune | RowKind::Eval => 2,
            RowKind::Prefill | RowKind::Decode => 1,
        };
        if spec.tokens.len() < min {
            return Err(FlowError::JobTooShort {
                tag: spec.tag,
                got: spec.tokens.len(),
                min,
            });
        }
        if let Some(labels) = &spec.labels {
            if labels.len() != spec.tokens.len() {
                return Err(FlowError::LabelMismatch {
                    tag: spec.tag,
                    labels: labels.len(),
                    tokens: spec.tokens.len(),
                });
            }
        }
        match spec.kind {
            RowKind::Finetune => {
                let slot = spec.slot.ok_or(FlowError::FinetuneNeedsAdapter { tag: spec.tag })?;
                if seen_f_slots.contains(&slot) {
                    return Err(FlowError::AmbiguousAdapterOwnership { slot });
                }
                seen_f_slots.push(slot);
                f_jobs += 1;
                f_rows += spec.tokens.len();
            }
            RowKind::Prefill => {
                if spec.cache_idx.is_none() {
                    return Err(FlowError::MissingCache { tag: spec.tag });
                }
            }
            RowKind::Decode => {
                if spec.tokens.len() != 1 {
                    return Err(FlowError::JobTooShort {
                        tag: spec.tag,
                        got: spec.tokens.len(),
                        min: 1,
                    });
                }
                if spec.cache_idx.is_none() {
                    return Err(FlowError::MissingCache { tag: spec.tag });
                }
            }
            RowKind::Eval => {}
        }
        let row_start = tokens.len();
        let row_count = spec.tokens.len();
        tokens.extend_from_slice(&spec.tokens);
        segments.push(Segment {
            row_start,
            row_count,
            adapter_slot: spec.slot,
            scale_mul: spec.scale,
        });
        placed.push(PlacedJob {
            spec,
            row_start,
            row_count,
        });
    }
    let total = tokens.len();
    let seg = SegmentMap::new(segments, total)?;
    Ok(UnifiedBatch {
        jobs: placed,
        tokens,
        seg,
        f_jobs,
        f_rows,
    })
}

/// Saved activations for one decoder layer, fine-tune prefix only.
#[derive(Debug, Clone)]
pub struct LayerTrace<S> {
    x_in: Matrix<S>,
    h_norm: Matrix<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    attn_probs: Vec<AttnTrace<S>>,
    attn_out: Matrix<S>,
    x_mid: Matrix<S>,
    m_norm: Matrix<S>,
    up: Matrix<S>,
    gate: Matrix<S>,
    act: Matrix<S>,
    dropout: [Option<DropoutPlan<S>>; 7],
}

/// Saved forward state needed by [`flow_backward`].
#[derive(Debug, Clone)]
pub struct StepTrace<S> {
    layers: Vec<LayerTrace<S>>,
    x_out: Matrix<S>,
    f_seg: SegmentMap,
    positions_f: Vec<usize>,
}

/// Joint logits for every packed row, plus the backward trace when fine-tune
/// rows were present and requested.
pub struct FlowOutput<S> {
    pub logits: Matrix<S>,
    pub trace: Option<StepTrace<S>>,
}

fn check_job_tokens<S: Scalar>(
    base: &BaseWeights<S>,
    job: &PlacedJob,
) -> Result<(), FlowError> {
    let cfg = &base.config;
    if job.spec.tokens.len() > cfg.max_seq {
        return Err(FlowError::Model(ModelError::SequenceTooLong {
            got: job.spec.tokens.len(),
            max: cfg.max_seq,
        }));
    }
    for &t in &job.spec.tokens {
        if t as usize >= cfg.vocab_size {
            return Err(FlowError::Model(ModelError::TokenOutOfRange(
                t,
                cfg.vocab_size,
            )));
        }
    }
    if let Some(labels) = &job.spec.labels {
        for &t in labels {
            if t != crate::tensor::IGNORE_ID && t as usize >= cfg.vocab_size {
                return Err(FlowError::Model(ModelError::TokenOutOfRange(
                    t,
                    cfg.vocab_size,
                )));
            }
        }
    }
    Ok(())
}

/// One unified forward pass over a packed batch.
///
/// `caches` holds the KV caches that prefill/decode jobs index into;
/// `ft_rngs` supplies one RNG per fine-tune job (in batch order) for dropout
/// mask sampling, so a job's draws do not depend on its batch neighbors.
pub fn flow_forward<S: Scalar>(
    base: &BaseWeights<S>,
    rope: &RopeTable<S>,
    adapters: &[&LoraAdapter<S>],
    batch: &UnifiedBatch,
    caches: &mut [KvCache<S>],
    mut ft_rngs: Vec<&mut SeededRng>,
    want_trace: bool,
) -> Result<FlowOutput<S>, FlowError> {
    let cfg = &base.config;
    let (f_jobs, f_rows) = batch.finetune_span();
    if ft_rngs.len() != f_jobs {
        return Err(FlowError::RngCount {
            expected: f_jobs,
            got: ft_rngs.len(),
        });
    }

    // Validation and per-row positions.
    let mut positions = Vec::with_capacity(batch.total_rows());
    for job in batch.jobs() {
        check_job_tokens(base, job)?;
        match job.spec.kind {
            RowKind::Finetune | RowKind::Eval => positions.extend(0..job.row_count),
            RowKind::Prefill => {
                let idx = job.spec.cache_idx.unwrap();
                let cache = caches.get(idx).ok_or(FlowError::CacheOutOfRange {
                    tag: job.spec.tag,
                    idx,
                    len: caches.len(),
                })?;
                if !cache.is_empty() {
                    return Err(FlowError::Model(ModelError::CacheNotEmpty(cache.len())));
                }
                positions.extend(0..job.row_count);
            }
            RowKind::Decode => {
                let idx = job.spec.cache_idx.unwrap();
                let cache = caches.get(idx).ok_or(FlowError::CacheOutOfRange {
                    tag: job.spec.tag,
                    idx,
                    len: caches.len(),
                })?;
                if cache.is_empty() {
                    return Err(FlowError::Model(ModelError::CacheEmpty));
                }
                if cache.len() >= cfg.max_seq {
                    return Err(FlowError::Model(ModelError::CacheFull(cfg.max_seq)));
                }
                positions.push(cache.len());
            }
        }
    }

    let trace_on = want_trace && f_rows > 0;
    let mut layer_traces: Vec<LayerTrace<S>> = Vec::new();
    let eps = S::from_f64(cfg.rms_eps);
    let mut x = embedding(&base.embedding, batch.tokens());

    for layer in 0..cfg.n_layers {
        let lw = &base.layers[layer];
        // Dropout plans for this layer, one per target kind, drawn from each
        // fine-tune job's own stream in a fixed target order.
        let mut dropout: [Option<DropoutPlan<S>>; 7] = Default::default();
        for (ji, rng) in ft_rngs.iter_mut().enumerate().take(f_jobs) {
            let job = &batch.jobs()[ji];
            let slot = job.spec.slot.unwrap();
            let adapter = adapters[slot];
            if adapter.dropout() <= 0.0 {
                continue;
            }
            for t in TargetLinear::ALL {
                if adapter.pair(layer, t).is_none() {
                    continue;
                }
                let (in_features, _) = t.dims(cfg.hidden, cfg.mlp_hidden);
                let mask = DropoutPlan::sample_mask(
                    job.row_count,
                    in_features,
                    adapter.dropout(),
                    rng,
                );
                let plan = dropout[t.index()]
                    .get_or_insert_with(|| DropoutPlan::none(batch.jobs().len()));
                plan.masks[ji] = Some(mask);
            }
        }
        let plan_for = |t: TargetLinear| dropout[t.index()].as_ref();

        let h_norm = rms_norm(&x, &lw.attn_norm, eps);
        let mut q = segmented_forward(
            &h_norm,
            &lw.wq,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::Q,
            plan_for(TargetLinear::Q),
        );
        let mut k = segmented_forward(
            &h_norm,
            &lw.wk,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::K,
            plan_for(TargetLinear::K),
        );
        let v = segmented_forward(
            &h_norm,
            &lw.wv,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::V,
            plan_for(TargetLinear::V),
        );
        rope.apply(&mut q, &positions);
        rope.apply(&mut k, &positions);

        // Attention branches per job; projections stay joint.
        let mut attn_out = Matrix::zeros(x.rows(), cfg.hidden);
        let mut attn_probs: Vec<AttnTrace<S>> = Vec::new();
        for job in batch.jobs() {
            let q_span = q.slice_rows(job.row_start, job.row_count);
            match job.spec.kind {
                RowKind::Finetune | RowKind::Eval => {
                    let k_span = k.slice_rows(job.row_start, job.row_count);
                    let v_span = v.slice_rows(job.row_start, job.row_count);
                    let keep = trace_on && job.spec.kind == RowKind::Finetune;
                    let (out, tr) = causal_attention(&q_span, &k_span, &v_span, cfg.n_heads, keep);
                    attn_out.write_rows(job.row_start, &out);
                    if let Some(tr) = tr {
                        attn_probs.push(tr);
                    }
                }
                RowKind::Prefill | RowKind::Decode => {
                    let cache = &mut caches[job.spec.cache_idx.unwrap()];
                    for r in 0..job.row_count {
                        cache.append(
                            layer,
                            k.row(job.row_start + r),
                            v.row(job.row_start + r),
                        )?;
                    }
                    let (out, _) = causal_attention(
                        &q_span,
                        cache.keys(layer),
                        cache.values(layer),
                        cfg.n_heads,
                        false,
                    );
                    attn_out.write_rows(job.row_start, &out);
                }
            }
        }

        let o = segmented_forward(
            &attn_out,
            &lw.wo,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::O,
            plan_for(TargetLinear::O),
        );
        let x_in_f = trace_on.then(|| x.slice_rows(0, f_rows));
        x.add_assign(&o);
        let x_mid_f = trace_on.then(|| x.slice_rows(0, f_rows));

        let m_norm = rms_norm(&x, &lw.mlp_norm, eps);
        let up = segmented_forward(
            &m_norm,
            &lw.w_up,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::Up,
            plan_for(TargetLinear::Up),
        );
        let gate = segmented_forward(
            &m_norm,
            &lw.w_gate,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::Gate,
            plan_for(TargetLinear::Gate),
        );
        let act = silu(&gate).hadamard(&up);
        let down = segmented_forward(
            &act,
            &lw.w_down,
            batch.seg(),
            adapters,
            layer,
            TargetLinear::Down,
            plan_for(TargetLinear::Down),
        );

        if trace_on {
            layer_traces.push(LayerTrace {
                x_in: x_in_f.unwrap(),
                h_norm: h_norm.slice_rows(0, f_rows),
                q: q.slice_rows(0, f_rows),
                k: k.slice_rows(0, f_rows),
                v: v.slice_rows(0, f_rows),
                attn_probs,
                attn_out: attn_out.slice_rows(0, f_rows),
                x_mid: x_mid_f.unwrap(),
                m_norm: m_norm.slice_rows(0, f_rows),
                up: up.slice_rows(0, f_rows),
                gate: gate.slice_rows(0, f_rows),
                act: act.slice_rows(0, f_rows),
                dropout,
            });
        }
        x.add_assign(&down);
    }

    let final_h = rms_norm(&x, &base.final_norm, eps);
    let logits = final_h.matmul_nt(&base.lm_head);
    let trace = trace_on.then(|| StepTrace {
        layers: layer_traces,
        x_out: x.slice_rows(0, f_rows),
        f_seg: batch.seg().prefix(f_rows),
        positions_f: positions[..f_rows].to_vec(),
    });
    Ok(FlowOutput { logits, trace })
}

/// One job's scalar loss.
#[derive(Debug, Clone, Copy)]
pub struct JobLoss<S> {
    pub job_index: usize,
    pub tag: u64,
    pub kind: RowKind,
    /// Mean shifted cross-entropy over this job's contributing positions.
    pub loss: S,
    pub token_count: usize,
}

/// Per-job mean losses for every fine-tune and eval job in the batch.
pub fn compute_losses<S: Scalar>(
    batch: &UnifiedBatch,
    logits: &Matrix<S>,
) -> Result<Vec<JobLoss<S>>, FlowError> {
    assert_eq!(logits.rows(), batch.total_rows(), "logits row mismatch");
    let mut out = Vec::new();
    for (ji, job) in batch.jobs().iter().enumerate() {
        if !matches!(job.spec.kind, RowKind::Finetune | RowKind::Eval) {
            continue;
        }
        let span = logits.slice_rows(job.row_start, job.row_count);
        let labels = job.spec.labels.as_ref().unwrap_or(&job.spec.tokens);
        let (sum, count, _) =
            cross_entropy_shifted_sum(&span, labels, crate::tensor::IGNORE_ID)?;
        out.push(JobLoss {
            job_index: ji,
            tag: job.spec.tag,
            kind: job.spec.kind,
            loss: sum / S::from_f64(count as f64),
            token_count: count,
        });
    }
    Ok(out)
}

/// Losses for the fine-tune jobs plus the gradient of
/// `sum_j weight_j * mean_loss_j` w.r.t. the fine-tune prefix logits.
/// `weights` has one entry per fine-tune job in batch order (usually `1/A`
/// for gradient accumulation over `A` micro-batches).
pub fn finetune_loss_backward<S: Scalar>(
    batch: &UnifiedBatch,
    logits: &Matrix<S>,
    weights: &[f64],
) -> Result<(Vec<JobLoss<S>>, Matrix<S>), FlowError> {
    let (f_jobs, f_rows) = batch.finetune_span();
    assert_eq!(weights.len(), f_jobs, "one weight per fine-tune job");
    let mut d_logits = Matrix::zeros(f_rows, logits.cols());
    let mut losses = Vec::with_capacity(f_jobs);
    for (ji, job) in batch.jobs().iter().take(f_jobs).enumerate() {
        let span = logits.slice_rows(job.row_start, job.row_count);
        let labels = job.spec.labels.as_ref().unwrap_or(&job.spec.tokens);
        let (sum, count, mut d_span) =
            cross_entropy_shifted_sum(&span, labels, crate::tensor::IGNORE_ID)?;
        let inv_count = S::from_f64(1.0 / count as f64);
        d_span.scale_assign(inv_count * S::from_f64(weights[ji]));
        d_logits.write_rows(job.row_start, &d_span);
        losses.push(JobLoss {
            job_index: ji,
            tag: job.spec.tag,
            kind: RowKind::Finetune,
            loss: sum * inv_count,
            token_count: count,
        });
    }
    Ok((losses, d_logits))
}

/// Backward over the fine-tune prefix. Returns one gradient set per adapter
/// slot (`None` for slots with no gradient). `grad_mask` selects which slots
/// may receive gradients; everything else, including all base weights, is
/// structurally excluded rather than zeroed after the fact.
pub fn flow_backward<S: Scalar>(
    base: &BaseWeights<S>,
    rope: &RopeTable<S>,
    adapters: &[&LoraAdapter<S>],
    batch: &UnifiedBatch,
    trace: &StepTrace<S>,
    d_logits_f: &Matrix<S>,
    grad_mask: &[bool],
) -> Result<Vec<Option<AdapterGradSet<S>>>, FlowError> {
    let cfg = &base.config;
    let (f_jobs, f_rows) = batch.finetune_span();
    if f_rows == 0 {
        return Ok(adapters.iter().map(|_| None).collect());
    }
    assert_eq!(d_logits_f.rows(), f_rows, "gradient rows != fine-tune rows");
    let eps = S::from_f64(cfg.rms_eps);
    let f_seg = &trace.f_seg;

    let mut grad_sets: Vec<Option<AdapterGradSet<S>>> =
        adapters.iter().map(|_| None).collect();
    let absorb = |layer: usize,
                  target: TargetLinear,
                  grads: Vec<Option<crate::lora::PairGrad<S>>>,
                  grad_sets: &mut Vec<Option<AdapterGradSet<S>>>| {
        for (slot, g) in grads.into_iter().enumerate() {
            if let Some(pair) = g {
                grad_sets[slot]
                    .get_or_insert_with(|| AdapterGradSet::empty(cfg.n_layers))
                    .accumulate(layer, target, pair);
            }
        }
    };

    // Head: logits = rms_norm(x_out) · lm_headᵀ
    let d_final_h = d_logits_f.matmul(&base.lm_head);
    let (mut d_x, _) = rms_norm_backward(&trace.x_out, &base.final_norm, eps, &d_final_h);

    for layer in (0..cfg.n_layers).rev() {
        let lw = &base.layers[layer];
        let lt = &trace.layers[layer];
        let plan_for = |t: TargetLinear| lt.dropout[t.index()].as_ref();

        // MLP block: x_out = x_mid + down(silu(gate) ⊙ up)
        let (d_act, g_down) = segmented_backward(
            &lt.act,
            &d_x,
            &lw.w_down,
            f_seg,
            adapters,
            layer,
            TargetLinear::Down,
            grad_mask,
            plan_for(TargetLinear::Down),
        );
        absorb(layer, TargetLinear::Down, g_down, &mut grad_sets);
        let d_up = silu(&lt.gate).hadamard(&d_act);
        let d_gate = silu_backward(&lt.gate, &d_act.hadamard(&lt.up));
        let (d_m1, g_up) = segmented_backward(
            &lt.m_norm,
            &d_up,
            &lw.w_up,
            f_seg,
            adapters,
            layer,
            TargetLinear::Up,
            grad_mask,
            plan_for(TargetLinear::Up),
        );
        absorb(layer, TargetLinear::Up, g_up, &mut grad_sets);
        let (d_m2, g_gate) = segmented_backward(
            &lt.m_norm,
            &d_gate,
            &lw.w_gate,
            f_seg,
            adapters,
            layer,
            TargetLinear::Gate,
            grad_mask,
            plan_for(TargetLinear::Gate),
        );
        absorb(layer, TargetLinear::Gate, g_gate, &mut grad_sets);
        let mut d_m = d_m1;
        d_m.add_assign(&d_m2);
        let (d_norm_in, _) = rms_norm_backward(&lt.x_mid, &lw.mlp_norm, eps, &d_m);
        let mut d_x_mid = d_x;
        d_x_mid.add_assign(&d_norm_in);

        // Attention block: x_mid = x_in + o(attn(q, k, v))
        let (d_attn, g_o) = segmented_backward(
            &lt.attn_out,
            &d_x_mid,
            &lw.wo,
            f_seg,
            adapters,
            layer,
            TargetLinear::O,
            grad_mask,
            plan_for(TargetLinear::O),
        );
        absorb(layer, TargetLinear::O, g_o, &mut grad_sets);
        let mut d_q = Matrix::zeros(f_rows, cfg.hidden);
        let mut d_k = Matrix::zeros(f_rows, cfg.hidden);
        let mut d_v = Matrix::zeros(f_rows, cfg.hidden);
        for (ji, job) in batch.jobs().iter().take(f_jobs).enumerate() {
            let span = |m: &Matrix<S>| m.slice_rows(job.row_start, job.row_count);
            let (dq, dk, dv) = causal_attention_backward(
                &span(&lt.q),
                &span(&lt.k),
                &span(&lt.v),
                &lt.attn_probs[ji],
                &span(&d_attn),
                cfg.n_heads,
            );
            d_q.write_rows(job.row_start, &dq);
            d_k.write_rows(job.row_start, &dk);
            d_v.write_rows(job.row_start, &dv);
        }
        rope.apply_backward(&mut d_q, &trace.positions_f);
        rope.apply_backward(&mut d_k, &trace.positions_f);
        let (d_h1, g_q) = segmented_backward(
            &lt.h_norm,
            &d_q,
            &lw.wq,
            f_seg,
            adapters,
            layer,
            TargetLinear::Q,
            grad_mask,
            plan_for(TargetLinear::Q),
        );
        absorb(layer, TargetLinear::Q, g_q, &mut grad_sets);
        let (d_h2, g_k) = segmented_backward(
            &lt.h_norm,
            &d_k,
            &lw.wk,
            f_seg,
            adapters,
            layer,
            TargetLinear::K,
            grad_mask,
            plan_for(TargetLinear::K),
        );
        absorb(layer, TargetLinear::K, g_k, &mut grad_sets);
        let (d_h3, g_v) = segmented_backward(
            &lt.h_norm,
            &d_v,
            &lw.wv,
            f_seg,
            adapters,
            layer,
            TargetLinear::V,
            grad_mask,
            plan_for(TargetLinear::V),
        );
        absorb(layer, TargetLinear::V, g_v, &mut grad_sets);
        let mut d_h = d_h1;
        d_h.add_assign(&d_h2);
        d_h.add_assign(&d_h3);
        let (d_norm_in, _) = rms_norm_backward(&lt.x_in, &lw.attn_norm, eps, &d_h);
        d_x = d_x_mid;
        d_x.add_assign(&d_norm_in);
    }
    Ok(grad_sets)
}

//! LoRA adapters and the segmented multi-adapter matmul.
//!
//! Adapters are stored and dispatched one linear layer at a time — never
//! concatenated across layers — so target sets may differ per layer and
//! adapters can be swapped between steps without rebuilding weights. A packed
//! batch carries a [`SegmentMap`]: contiguous row ranges that each apply one
//! adapter's low-rank delta (or none). The kernel computes the base
//! projection jointly over all rows, then walks the segments and adds each
//! delta in the two-step low-rank order `(X·Aᵀ)·Bᵀ`, which costs
//! `S·r·(in+out)` instead of `S·in·out`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerError, TensorContainer};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// The seven linear projections an adapter may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetLinear {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl TargetLinear {
    pub const ALL: [TargetLinear; 7] = [
        TargetLinear::Q,
        TargetLinear::K,
        TargetLinear::V,
        TargetLinear::O,
        TargetLinear::Up,
        TargetLinear::Gate,
        TargetLinear::Down,
    ];

    /// Targets inside the MLP block only.
    pub const MLP: [TargetLinear; 3] = [TargetLinear::Up, TargetLinear::Gate, TargetLinear::Down];

    pub fn index(self) -> usize {
        match self {
            TargetLinear::Q => 0,
            TargetLinear::K => 1,
            TargetLinear::V => 2,
            TargetLinear::O => 3,
            TargetLinear::Up => 4,
            TargetLinear::Gate => 5,
            TargetLinear::Down => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetLinear::Q => "q",
            TargetLinear::K => "k",
            TargetLinear::V => "v",
            TargetLinear::O => "o",
            TargetLinear::Up => "up",
            TargetLinear::Gate => "gate",
            TargetLinear::Down => "down",
        }
    }

    pub fn from_name(name: &str) -> Option<TargetLinear> {
        TargetLinear::ALL.iter().copied().find(|t| t.name() == name)
    }

    /// `(in, out)` features of this projection for the given model widths.
    pub fn dims(self, hidden: usize, mlp_hidden: usize) -> (usize, usize) {
        match self {
            TargetLinear::Q | TargetLinear::K | TargetLinear::V | TargetLinear::O => {
                (hidden, hidden)
            }
            TargetLinear::Up | TargetLinear::Gate => (hidden, mlp_hidden),
            TargetLinear::Down => (mlp_hidden, hidden),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("adapter {0:?} already has baked static scaling")]
    AlreadyBaked(String),
    #[error("dynamic scale must be finite and positive, got {0}")]
    InvalidDynamicScale(f64),
    #[error("segments do not tile [0, {expected}): problem at row {at}")]
    BadSegmentation { expected: usize, at: usize },
    #[error("adapter file: {0}")]
    Container(#[from] ContainerError),
    #[error("adapter file metadata: {0}")]
    Metadata(String),
}

/// One low-rank pair: `a` is `[r, in]`, `b` is `[out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<S> {
    pub a: Matrix<S>,
    pub b: Matrix<S>,
}

impl<S: Scalar> LoraPair<S> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

type LayerPairs<S> = [Option<LoraPair<S>>; 7];

fn empty_layer<S>() -> LayerPairs<S> {
    [None, None, None, None, None, None, None]
}

/// A LoRA adapter: one optional low-rank pair per (decoder layer, target
/// projection). Static scaling `alpha / r` can be baked into `b` once, after
/// which the live scaling factor is 1.
#[derive(Debug, Clone)]
pub struct LoraAdapter<S> {
    id: String,
    rank: usize,
    alpha: f64,
    dropout: f64,
    baked: bool,
    layers: Vec<LayerPairs<S>>,
}

impl<S: Scalar> LoraAdapter<S> {
    /// Fine-tuning initialization: `a` seeded Gaussian (sigma 0.02), `b`
    /// zero, so a fresh adapter is a zero delta.
    pub fn init_finetune(
        id: impl Into<String>,
        rank: usize,
        alpha: f64,
        dropout: f64,
        targets: &[TargetLinear],
        n_layers: usize,
        hidden: usize,
        mlp_hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(rank >= 1, "rank must be >= 1");
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut pairs = empty_layer();
            for &t in targets {
                let (inf, outf) = t.dims(hidden, mlp_hidden);
                let a = Matrix::from_vec(
                    rank,
                    inf,
                    (0..rank * inf)
                        .map(|_| S::from_f64(rng.next_gaussian() * 0.02))
                        .collect(),
                );
                let b = Matrix::zeros(outf, rank);
                pairs[t.index()] = Some(LoraPair { a, b });
            }
            layers.push(pairs);
        }
        LoraAdapter {
            id: id.into(),
            rank,
            alpha,
            dropout,
            baked: false,
            layers,
        }
    }

    /// Adapter with explicit pairs on every layer (test/loading helper).
    pub fn from_pairs(
        id: impl Into<String>,
        rank: usize,
        alpha: f64,
        layers: Vec<Vec<(TargetLinear, LoraPair<S>)>>,
    ) -> Self {
        let layers = layers
            .into_iter()
            .map(|list| {
                let mut pairs = empty_layer();
                for (t, p) in list {
                    assert_eq!(p.rank(), rank, "pair rank mismatch for {:?}", t);
                    pairs[t.index()] = Some(p);
                }
                pairs
            })
            .collect();
        LoraAdapter {
            id: id.into(),
            rank,
            alpha,
            dropout: 0.0,
            baked: false,
            layers,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn is_baked(&self) -> bool {
        self.baked
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Live scaling factor applied at forward time.
    pub fn scaling(&self) -> f64 {
        if self.baked {
            1.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn pair(&self, layer: usize, target: TargetLinear) -> Option<&LoraPair<S>> {
        self.layers[layer][target.index()].as_ref()
    }

    pub fn pair_mut(&mut self, layer: usize, target: TargetLinear) -> Option<&mut LoraPair<S>> {
        self.layers[layer][target.index()].as_mut()
    }

    /// Target kinds present on layer 0 (targets are uniform across layers).
    pub fn targets(&self) -> Vec<TargetLinear> {
        TargetLinear::ALL
            .iter()
            .copied()
            .filter(|t| !self.layers.is_empty() && self.layers[0][t.index()].is_some())
            .collect()
    }

    /// Iterate all `(layer, target, pair)` triples in a fixed order.
    pub fn iter_pairs(&self) -> impl Iterator<Item = (usize, TargetLinear, &LoraPair<S>)> {
        self.layers.iter().enumerate().flat_map(|(l, pairs)| {
            TargetLinear::ALL.iter().filter_map(move |&t| {
                pairs[t.index()].as_ref().map(move |p| (l, t, p))
            })
        })
    }

    /// Fold `alpha / r` into `b` so the live scaling factor becomes 1.
    /// Forward outputs are unchanged.
    pub fn bake_static_scaling(&mut self) -> Result<(), LoraError> {
        if self.baked {
            return Err(LoraError::AlreadyBaked(self.id.clone()));
        }
        let scale = S::from_f64(self.alpha / self.rank as f64);
        for pairs in &mut self.layers {
            for p in pairs.iter_mut().flatten() {
                p.b.scale_assign(scale);
            }
        }
        self.baked = true;
        Ok(())
    }

    /// Total adapter parameter bytes (excludes metadata).
    pub fn byte_size(&self) -> usize {
        let elem = S::DTYPE.size_bytes();
        self.iter_pairs()
            .map(|(_, _, p)| (p.a.rows() * p.a.cols() + p.b.rows() * p.b.cols()) * elem)
            .sum()
    }

    /// FNV-1a over every tensor's little-endian bytes, in manifest order.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, _, p) in self.iter_pairs() {
            for &v in p.a.data() {
                v.write_le(&mut bytes);
            }
            for &v in p.b.data() {
                v.write_le(&mut bytes);
            }
        }
        crate::fnv1a64(&bytes)
    }

    pub(crate) fn meta(&self) -> AdapterMeta {
        AdapterMeta {
            adapter_id: self.id.clone(),
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            baked: self.baked,
            n_layers: self.layers.len(),
            targets: self.targets().iter().map(|t| t.name().to_string()).collect(),
        }
    }

    pub(crate) fn write_tensors(&self, c: &mut TensorContainer<S>, prefix: &str) {
        for (l, t, p) in self.iter_pairs() {
            c.insert(format!("{prefix}layers.{l}.{}.lora_a", t.name()), p.a.clone());
            c.insert(format!("{prefix}layers.{l}.{}.lora_b", t.name()), p.b.clone());
        }
    }

    pub(crate) fn from_meta_and_tensors(
        meta: AdapterMeta,
        c: &mut TensorContainer<S>,
        prefix: &str,
    ) -> Result<Self, LoraError> {
        let mut layers = Vec::with_capacity(meta.n_layers);
        for l in 0..meta.n_layers {
            let mut pairs = empty_layer();
            for name in &meta.targets {
                let t = TargetLinear::ALL
                    .iter()
                    .copied()
                    .find(|t| t.name() == name)
                    .ok_or_else(|| LoraError::Metadata(format!("unknown target {name:?}")))?;
                let a = c
                    .take(&format!("{prefix}layers.{l}.{}.lora_a", t.name()))
                    .ok_or_else(|| LoraError::Metadata(format!("missing lora_a for {l}/{name}")))?;
                let b = c
                    .take(&format!("{prefix}layers.{l}.{}.lora_b", t.name()))
                    .ok_or_else(|| LoraError::Metadata(format!("missing lora_b for {l}/{name}")))?;
                pairs[t.index()] = Some(LoraPair { a, b });
            }
            layers.push(pairs);
        }
        Ok(LoraAdapter {
            id: meta.adapter_id,
            rank: meta.rank,
            alpha: meta.alpha,
            dropout: meta.dropout,
            baked: meta.baked,
            layers,
        })
    }

    pub fn to_container(&self) -> TensorContainer<S> {
        let mut c = TensorContainer::with_metadata(
            serde_json::to_string(&self.meta()).expect("adapter metadata serializes"),
        );
        self.write_tensors(&mut c, "");
        c
    }

    pub fn from_container(mut c: TensorContainer<S>) -> Result<Self, LoraError> {
        let meta: AdapterMeta = serde_json::from_str(c.metadata())
            .map_err(|e| LoraError::Metadata(e.to_string()))?;
        Self::from_meta_and_tensors(meta, &mut c, "")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct AdapterMeta {
    pub(crate) adapter_id: String,
    pub(crate) rank: usize,
    pub(crate) alpha: f64,
    pub(crate) dropout: f64,
    pub(crate) baked: bool,
    pub(crate) n_layers: usize,
    pub(crate) targets: Vec<String>,
}

/// Gradients for one adapter, mirroring its `(layer, target)` pair layout.
/// Also used as the accumulation buffer across micro-batches.
#[derive(Debug, Clone)]
pub struct AdapterGradSet<S> {
    layers: Vec<[Option<PairGrad<S>>; 7]>,
}

impl<S: Scalar> AdapterGradSet<S> {
    pub fn zeros_like(adapter: &LoraAdapter<S>) -> Self {
        let layers = (0..adapter.n_layers())
            .map(|l| {
                let mut slots: [Option<PairGrad<S>>; 7] = Default::default();
                for t in TargetLinear::ALL {
                    if let Some(p) = adapter.pair(l, t) {
                        slots[t.index()] = Some((
                            Matrix::zeros(p.a.rows(), p.a.cols()),
                            Matrix::zeros(p.b.rows(), p.b.cols()),
                        ));
                    }
                }
                slots
            })
            .collect();
        AdapterGradSet { layers }
    }

    pub fn empty(n_layers: usize) -> Self {
        AdapterGradSet {
            layers: (0..n_layers).map(|_| Default::default()).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn pair(&self, layer: usize, target: TargetLinear) -> Option<&PairGrad<S>> {
        self.layers[layer][target.index()].as_ref()
    }

    pub fn pair_mut(&mut self, layer: usize, target: TargetLinear) -> Option<&mut PairGrad<S>> {
        self.layers[layer][target.index()].as_mut()
    }

    /// Add `(d_a, d_b)` into the slot, creating it if absent.
    pub fn accumulate(&mut self, layer: usize, target: TargetLinear, grad: PairGrad<S>) {
        match &mut self.layers[layer][target.index()] {
            Some((ga, gb)) => {
                ga.add_assign(&grad.0);
                gb.add_assign(&grad.1);
            }
            e @ None => *e = Some(grad),
        }
    }

    pub fn add_set(&mut self, other: &AdapterGradSet<S>) {
        assert_eq!(self.layers.len(), other.layers.len(), "grad set layers");
        for (l, slots) in other.layers.iter().enumerate() {
            for t in TargetLinear::ALL {
                if let Some((a, b)) = &slots[t.index()] {
                    self.accumulate(l, t, (a.clone(), b.clone()));
                }
            }
        }
    }

    pub fn scale_assign(&mut self, factor: S) {
        for slots in &mut self.layers {
            for g in slots.iter_mut().flatten() {
                g.0.scale_assign(factor);
                g.1.scale_assign(factor);
            }
        }
    }

    pub fn iter_pairs(&self) -> impl Iterator<Item = (usize, TargetLinear, &PairGrad<S>)> {
        self.layers.iter().enumerate().flat_map(|(l, slots)| {
            TargetLinear::ALL.iter().filter_map(move |&t| {
                slots[t.index()].as_ref().map(move |g| (l, t, g))
            })
        })
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for (_, _, (a, b)) in self.iter_pairs() {
            for v in a.data().iter().chain(b.data().iter()) {
                m = m.max(v.to_f64().abs());
            }
        }
        m
    }
}

/// Validate a per-request dynamic scale factor.
pub fn validate_dynamic_scale(scale: f64) -> Result<(), LoraError> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(LoraError::InvalidDynamicScale(scale));
    }
    Ok(())
}

/// One contiguous row range of a packed batch, bound to at most one adapter
/// slot. `scale_mul` is the per-request dynamic scaling factor (1 when
/// unused); it composes multiplicatively with the adapter's static scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub row_start: usize,
    pub row_count: usize,
    pub adapter_slot: Option<usize>,
    pub scale_mul: f64,
}

impl Segment {
    pub fn new(row_start: usize, row_count: usize, adapter_slot: Option<usize>) -> Self {
        Segment {
            row_start,
            row_count,
            adapter_slot,
            scale_mul: 1.0,
        }
    }
}

/// Ordered, contiguous, non-overlapping segments covering `[0, total_rows)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    segments: Vec<Segment>,
    total_rows: usize,
}

impl SegmentMap {
    pub fn new(segments: Vec<Segment>, total_rows: usize) -> Result<Self, LoraError> {
        let mut next = 0usize;
        for s in &segments {
            if s.row_start != next || s.row_count == 0 {
                return Err(LoraError::BadSegmentation {
                    expected: total_rows,
                    at: s.row_start,
                });
            }
            next += s.row_count;
        }
        if next != total_rows {
            return Err(LoraError::BadSegmentation {
                expected: total_rows,
                at: next,
            });
        }
        Ok(SegmentMap {
            segments,
            total_rows,
        })
    }

    /// Build from one `(slot, dynamic scale)` per row, merging equal runs.
    pub fn from_row_slots(rows: &[(Option<usize>, f64)]) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &(slot, scale)) in rows.iter().enumerate() {
            match segments.last_mut() {
                Some(last)
                    if last.adapter_slot == slot
                        && last.scale_mul == scale
                        && last.row_start + last.row_count == i =>
                {
                    last.row_count += 1;
                }
                _ => segments.push(Segment {
                    row_start: i,
                    row_count: 1,
                    adapter_slot: slot,
                    scale_mul: scale,
                }),
            }
        }
        SegmentMap {
            segments,
            total_rows: rows.len(),
        }
    }

    /// Single segment covering all rows.
    pub fn single(total_rows: usize, adapter_slot: Option<usize>, scale_mul: f64) -> Self {
        SegmentMap {
            segments: vec![Segment {
                row_start: 0,
                row_count: total_rows,
                adapter_slot,
                scale_mul,
            }],
            total_rows,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Restriction to the first `rows` rows (used when only the fine-tune
    /// prefix of a batch participates in backward).
    pub fn prefix(&self, rows: usize) -> SegmentMap {
        assert!(rows <= self.total_rows);
        let mut segments = Vec::new();
        for s in &self.segments {
            if s.row_start >= rows {
                break;
            }
            let count = s.row_count.min(rows - s.row_start);
            segments.push(Segment {
                row_count: count,
                ..*s
            });
        }
        SegmentMap {
            segments,
            total_rows: rows,
        }
    }
}

/// Per-segment dropout masks for the adapter path. `masks[i]` matches
/// segment `i` of the map; `None` means no dropout on that segment. Mask
/// entries are `0` or `1/(1-p)` (inverted dropout), applied only to the
/// low-rank branch — the base projection always sees the raw input.
#[derive(Debug, Clone, Default)]
pub struct DropoutPlan<S> {
    pub masks: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> DropoutPlan<S> {
    pub fn none(n_segments: usize) -> Self {
        DropoutPlan {
            masks: (0..n_segments).map(|_| None).collect(),
        }
    }

    /// Sample a mask of the given shape from `rng`.
    pub fn sample_mask(rows: usize, cols: usize, p: f64, rng: &mut SeededRng) -> Matrix<S> {
        assert!((0.0..1.0).contains(&p), "dropout probability out of range");
        let keep = S::from_f64(1.0 / (1.0 - p));
        let data = (0..rows * cols)
            .map(|_| {
                if rng.next_uniform() < p {
                    S::ZERO
                } else {
                    keep
                }
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

fn resolve_pair<'a, S: Scalar>(
    adapters: &[&'a LoraAdapter<S>],
    slot: usize,
    layer: usize,
    target: TargetLinear,
    in_features: usize,
    out_features: usize,
) -> Option<(&'a LoraPair<S>, f64)> {
    assert!(
        slot < adapters.len(),
        "adapter slot {slot} out of range ({} bound)",
        adapters.len()
    );
    let adapter = adapters[slot];
    let pair = adapter.pair(layer, target)?;
    assert_eq!(
        pair.a.cols(),
        in_features,
        "adapter {:?} lora_a width mismatch on {}/{}",
        adapter.id(),
        layer,
        target.name()
    );
    assert_eq!(
        pair.b.rows(),
        out_features,
        "adapter {:?} lora_b height mismatch on {}/{}",
        adapter.id(),
        layer,
        target.name()
    );
    Some((pair, adapter.scaling()))
}

/// Segmented multi-adapter projection: `y = x·base_wᵀ` jointly over all rows,
/// plus `scale · (x_s·aᵀ)·bᵀ` per adapter segment. Rows stay in input order.
pub fn segmented_forward<S: Scalar>(
    x: &Matrix<S>,
    base_w: &Matrix<S>,
    seg: &SegmentMap,
    adapters: &[&LoraAdapter<S>],
    layer: usize,
    target: TargetLinear,
    dropout: Option<&DropoutPlan<S>>,
) -> Matrix<S> {
    assert_eq!(seg.total_rows(), x.rows(), "segment map does not cover input rows");
    let mut y = x.matmul_nt(base_w);
    for (si, s) in seg.segments().iter().enumerate() {
        let Some(slot) = s.adapter_slot else { continue };
        let Some((pair, scaling)) =
            resolve_pair(adapters, slot, layer, target, x.cols(), base_w.rows())
        else {
            continue;
        };
        let mut x_s = x.slice_rows(s.row_start, s.row_count);
        if let Some(plan) = dropout {
            if let Some(mask) = plan.masks.get(si).and_then(|m| m.as_ref()) {
                x_s = x_s.hadamard(mask);
            }
        }
        // Two-step low-rank order: never materialize b·a.
        let t = x_s.matmul_nt(&pair.a);
        let mut delta = t.matmul_nt(&pair.b);
        delta.scale_assign(S::from_f64(scaling * s.scale_mul));
        for r in 0..s.row_count {
            let dst = y.row_mut(s.row_start + r);
            for (d, &v) in dst.iter_mut().zip(delta.row(r).iter()) {
                *d += v;
            }
        }
    }
    y
}

/// Per-adapter gradient pair for one projection.
pub type PairGrad<S> = (Matrix<S>, Matrix<S>);

/// Backward of [`segmented_forward`] for the LoRA parameters and the input.
///
/// `d_x` always includes every adapter's contribution (deeper layers need
/// it); `d_a`/`d_b` are produced only for slots present in `grad_mask` —
/// masked-out slots get `None`. Base weights receive no gradient.
pub fn segmented_backward<S: Scalar>(
    x: &Matrix<S>,
    d_y: &Matrix<S>,
    base_w: &Matrix<S>,
    seg: &SegmentMap,
    adapters: &[&LoraAdapter<S>],
    layer: usize,
    target: TargetLinear,
    grad_mask: &[bool],
    dropout: Option<&DropoutPlan<S>>,
) -> (Matrix<S>, Vec<Option<PairGrad<S>>>) {
    assert_eq!(seg.total_rows(), x.rows(), "segment map does not cover input rows");
    assert_eq!(d_y.rows(), x.rows(), "upstream gradient row mismatch");
    assert_eq!(d_y.cols(), base_w.rows(), "upstream gradient width mismatch");
    assert_eq!(grad_mask.len(), adapters.len(), "grad mask length");
    let mut d_x = d_y.matmul(base_w);
    let mut grads: Vec<Option<PairGrad<S>>> = adapters.iter().map(|_| None).collect();
    for (si, s) in seg.segments().iter().enumerate() {
        let Some(slot) = s.adapter_slot else { continue };
        let Some((pair, scaling)) =
            resolve_pair(adapters, slot, layer, target, x.cols(), base_w.rows())
        else {
            continue;
        };
        let eff = S::from_f64(scaling * s.scale_mul);
        let mask = dropout.and_then(|p| p.masks.get(si).and_then(|m| m.as_ref()));
        let mut x_s = x.slice_rows(s.row_start, s.row_count);
        if let Some(m) = mask {
            x_s = x_s.hadamard(m);
        }
        let d_y_s = d_y.slice_rows(s.row_start, s.row_count);
        // u = dY·b : [n, r]
        let u = d_y_s.matmul(&pair.b);
        // Input gradient through the low-rank path, chained through the mask.
        let mut d_x_lora = u.matmul(&pair.a);
        d_x_lora.scale_assign(eff);
        if let Some(m) = mask {
            d_x_lora = d_x_lora.hadamard(m);
        }
        for r in 0..s.row_count {
            let dst = d_x.row_mut(s.row_start + r);
            for (d, &v) in dst.iter_mut().zip(d_x_lora.row(r).iter()) {
                *d += v;
            }
        }
        if grad_mask[slot] {
            // dA += eff · uᵀ·x_s ; dB += eff · dYᵀ·(x_s·aᵀ)
            let mut d_a = u.matmul_tn(&x_s);
            d_a.scale_assign(eff);
            let t = x_s.matmul_nt(&pair.a);
            let mut d_b = d_y_s.matmul_tn(&t);
            d_b.scale_assign(eff);
            match &mut grads[slot] {
                Some((ga, gb)) => {
                    ga.add_assign(&d_a);
                    gb.add_assign(&d_b);
                }
                e @ None => *e = Some((d_a, d_b)),
            }
        }
    }
    // Masked-in slots that appear in the map but had no rows this call still
    // get explicit zero grads so accumulation shapes stay stable.
    for (slot, g) in grads.iter_mut().enumerate() {
        if g.is_none() && grad_mask[slot] {
            if let Some(pair) = adapters[slot].pair(layer, target) {
                *g = Some((
                    Matrix::zeros(pair.a.rows(), pair.a.cols()),
                    Matrix::zeros(pair.b.rows(), pair.b.cols()),
                ));
            }
        }
    }
    (d_x, grads)
}

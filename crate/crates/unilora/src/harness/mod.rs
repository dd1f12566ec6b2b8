//! Workload generation, trace files, run configuration, and trace replay.
//!
//! Traces are line-oriented JSON: one record per line, `#` lines and blank
//! lines ignored. Records carry arrival times and shape (prompt length, new
//! tokens); actual token content is synthesized deterministically from
//! `(config seed, record id)`, so a trace plus a config pins every byte of
//! a run. Replay drives the runtime's virtual clock, honors `arrival_ms`,
//! and emits a metrics CSV, a per-request verdict CSV, and a summary
//! record, each stamped with the config hash.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::TargetLinear;
use crate::model::{BaseWeights, ModelConfig};
use crate::rng::SeededRng;
use crate::runtime::{
    InferenceSubmission, RequestKind, Runtime, RuntimeError, SchedulerConfig, SloPolicy,
    TrainJobSpec,
};
use crate::scalar::Scalar;
use crate::tensor::TokenId;
use crate::train::{OptimizerKind, TrainHyper};
use crate::vm::VirtualModel;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Arrival kind in a trace file. `prefill` requests transition to decoding
/// inside the runtime; `finetune` records register training jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Prefill,
    Evaluate,
    Finetune,
}

/// One trace line. Only shape is stored; tokens are synthesized at replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub arrival_ms: u64,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub prompt_len: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub max_new_tokens: usize,
    /// Evaluation: score only this many trailing label positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_len: Option<usize>,
    /// Fine-tune: optimizer steps to run; absent means the whole run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic_scale: Option<f64>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// Serialize records one JSON object per line.
pub fn trace_to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

/// Parse a JSONL trace. Blank lines and `#` comments are skipped; errors
/// carry 1-based line numbers.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, HarnessError> {
    let mut records = Vec::new();
    let mut last_arrival = 0u64;
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(trimmed)
            .map_err(|e| HarnessError::Trace {
                line,
                msg: e.to_string(),
            })?;
        let fail = |msg: String| HarnessError::Trace { line, msg };
        if rec.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", rec.id)));
        }
        if rec.arrival_ms < last_arrival {
            return Err(fail(format!(
                "arrival_ms {} decreases below {}",
                rec.arrival_ms, last_arrival
            )));
        }
        last_arrival = rec.arrival_ms;
        match rec.kind {
            TraceKind::Prefill => {
                if rec.prompt_len < 1 {
                    return Err(fail("prefill needs prompt_len >= 1".into()));
                }
                if rec.max_new_tokens < 1 {
                    return Err(fail("prefill needs max_new_tokens >= 1".into()));
                }
            }
            TraceKind::Evaluate => {
                if rec.prompt_len < 2 {
                    return Err(fail("evaluate needs prompt_len >= 2".into()));
                }
            }
            TraceKind::Finetune => {
                if rec.adapter_id.is_none() {
                    return Err(fail("finetune needs adapter_id".into()));
                }
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Column order of the CSV trace converter.
pub const TRACE_CSV_HEADER: &str =
    "id,arrival_ms,kind,adapter_id,prompt_len,max_new_tokens,label_len,train_steps,dynamic_scale";

/// Converter stub: CSV with [`TRACE_CSV_HEADER`] columns, no quoting, empty
/// cells for absent options. Validation matches [`parse_trace`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>, HarnessError> {
    let mut json_lines = String::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            json_lines.push('\n');
            continue;
        }
        if !saw_header {
            if trimmed != TRACE_CSV_HEADER {
                return Err(HarnessError::Trace {
                    line,
                    msg: format!("expected header {TRACE_CSV_HEADER:?}"),
                });
            }
            saw_header = true;
            json_lines.push('\n');
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').collect();
        if cells.len() != 9 {
            return Err(HarnessError::Trace {
                line,
                msg: format!("expected 9 cells, got {}", cells.len()),
            });
        }
        let fail = |msg: String| HarnessError::Trace { line, msg };
        let num = |cell: &str, name: &str| -> Result<u64, HarnessError> {
            if cell.is_empty() {
                return Ok(0);
            }
            cell.parse::<u64>()
                .map_err(|e| fail(format!("{name}: {e}")))
        };
        let opt_num = |cell: &str, name: &str| -> Result<Option<u64>, HarnessError> {
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse::<u64>()
                .map(Some)
                .map_err(|e| fail(format!("{name}: {e}")))
        };
        let kind = match cells[2] {
            "prefill" => TraceKind::Prefill,
            "evaluate" => TraceKind::Evaluate,
            "finetune" => TraceKind::Finetune,
            other => return Err(fail(format!("unknown kind {other:?}"))),
        };
        let dynamic_scale = if cells[8].is_empty() {
            None
        } else {
            Some(
                cells[8]
                    .parse::<f64>()
                    .map_err(|e| fail(format!("dynamic_scale: {e}")))?,
            )
        };
        let rec = TraceRecord {
            id: cells[0].to_string(),
            arrival_ms: num(cells[1], "arrival_ms")?,
            kind,
            adapter_id: (!cells[3].is_empty()).then(|| cells[3].to_string()),
            prompt_len: num(cells[4], "prompt_len")? as usize,
            max_new_tokens: num(cells[5], "max_new_tokens")? as usize,
            label_len: opt_num(cells[6], "label_len")?.map(|v| v as usize),
            train_steps: opt_num(cells[7], "train_steps")?,
            dynamic_scale,
        };
        // Reuse the JSONL validator by re-serializing onto the same line
        // number (blank lines pad the count).
        json_lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        json_lines.push('\n');
    }
    parse_trace(&json_lines)
}

/// Load a trace file; `.csv` goes through the converter stub, anything
/// else parses as JSONL.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Trace {
        line: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    if path.extension().is_some_and(|e| e == "csv") {
        parse_trace_csv(&text)
    } else {
        parse_trace(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Infer,
    Finetune,
    Unified,
    Mutable,
}

impl RunMode {
    pub fn from_name(name: &str) -> Option<RunMode> {
        match name {
            "infer" => Some(RunMode::Infer),
            "finetune" => Some(RunMode::Finetune),
            "unified" => Some(RunMode::Unified),
            "mutable" => Some(RunMode::Mutable),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Infer => "infer",
            RunMode::Finetune => "finetune",
            RunMode::Unified => "unified",
            RunMode::Mutable => "mutable",
        }
    }
}

/// SLO thresholds in the units people quote them in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SloSection {
    pub max_waiting_s: f64,
    pub mean_decoding_ms: f64,
    pub max_decoding_ms: u64,
}

impl Default for SloSection {
    fn default() -> Self {
        SloSection {
            max_waiting_s: 6.0,
            mean_decoding_ms: 200.0,
            max_decoding_ms: 1_000,
        }
    }
}

impl SloSection {
    pub fn to_policy(self) -> SloPolicy {
        SloPolicy {
            max_waiting_ms: (self.max_waiting_s * 1000.0).round() as u64,
            mean_decode_ms: self.mean_decoding_ms,
            max_decode_ms: self.max_decoding_ms,
        }
    }
}

/// Adapter shape and optimizer settings shared by all fine-tune jobs and
/// trace-provisioned serving adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<String>,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub accumulation_steps: u32,
    pub optimizer: String,
    pub weight_decay: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            rank: 8,
            alpha: 16.0,
            dropout: 0.0,
            targets: TargetLinear::ALL.iter().map(|t| t.name().to_string()).collect(),
            seq_len: 16,
            learning_rate: 2e-5,
            accumulation_steps: 4,
            optimizer: "adamw".into(),
            weight_decay: 0.0,
        }
    }
}

impl TrainingSection {
    pub fn target_linears(&self) -> Result<Vec<TargetLinear>, HarnessError> {
        if self.targets.is_empty() {
            return Err(config_err("training.targets must not be empty"));
        }
        self.targets
            .iter()
            .map(|name| {
                TargetLinear::from_name(name)
                    .ok_or_else(|| config_err(format!("unknown target linear {name:?}")))
            })
            .collect()
    }

    pub fn hyper(&self) -> Result<TrainHyper, HarnessError> {
        let optimizer = match self.optimizer.as_str() {
            "adamw" => OptimizerKind::AdamW,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(config_err(format!("unknown optimizer {other:?}"))),
        };
        Ok(TrainHyper {
            optimizer,
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            accum_steps: self.accumulation_steps,
            ..TrainHyper::default()
        })
    }
}

/// Workload shape used by `gen`; flags override these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub rps: f64,
    pub requests: usize,
    /// Adapters drawn uniformly for generated inference arrivals; empty
    /// falls back to a per-mode default mix.
    pub adapters: Vec<String>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            rps: 1.0,
            requests: 100,
            adapters: Vec::new(),
        }
    }
}

/// Whole-run configuration; every field has a default so an empty file is
/// a valid config. Flags override file values in the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub mode: RunMode,
    pub model: ModelConfig,
    pub scheduler: SchedulerConfig,
    pub slo: SloSection,
    pub training: TrainingSection,
    pub workload: WorkloadSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            precision: Precision::F64,
            mode: RunMode::Unified,
            model: ModelConfig::desk_default(),
            scheduler: SchedulerConfig::default(),
            slo: SloSection::default(),
            training: TrainingSection::default(),
            workload: WorkloadSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        self.scheduler
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if self.slo.max_waiting_s <= 0.0
            || self.slo.mean_decoding_ms <= 0.0
            || self.slo.max_decoding_ms == 0
        {
            return Err(config_err("all SLO thresholds must be positive"));
        }
        if self.training.rank < 1 {
            return Err(config_err("training.rank must be >= 1"));
        }
        if self.training.seq_len < 2 {
            return Err(config_err("training.seq_len must be >= 2"));
        }
        if self.training.seq_len > self.scheduler.row_budget {
            return Err(config_err(format!(
                "training.seq_len {} exceeds scheduler.row_budget {}",
                self.training.seq_len, self.scheduler.row_budget
            )));
        }
        if self.training.dropout < 0.0 || self.training.dropout >= 1.0 {
            return Err(config_err("training.dropout must lie in [0, 1)"));
        }
        if !self.workload.rps.is_finite() || self.workload.rps <= 0.0 {
            return Err(config_err("workload.rps must be positive"));
        }
        self.training.target_linears()?;
        self.training.hyper()?;
        Ok(())
    }

    /// Stable hash of the fully resolved config, echoed into every output.
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::fnv1a64(&json)
    }
}

/// Deterministic prompt content for one trace record.
pub fn synth_tokens(seed: u64, id: &str, len: usize, vocab: usize) -> Vec<TokenId> {
    let mut rng = SeededRng::derive(seed, &format!("tokens.{id}"));
    (0..len)
        .map(|_| rng.next_below(vocab as u64) as TokenId)
        .collect()
}

/// Phase layout of the mutable-rate workload: `(start_ms, duration_ms,
/// rps multiplier)` per phase.
pub const MUTABLE_PHASES: [(u64, u64, f64); 4] = [
    (0, 120_000, 1.0),
    (120_000, 60_000, 2.5),
    (180_000, 120_000, 2.0),
    (300_000, 120_000, 1.0),
];

/// Weighted adapter choice for generated inference arrivals; a `None`
/// entry routes requests to the bare base model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMix {
    entries: Vec<(Option<String>, f64)>,
}

impl AdapterMix {
    pub fn new(entries: Vec<(Option<String>, f64)>) -> Result<Self, HarnessError> {
        if entries.is_empty() {
            return Err(config_err("adapter mix must not be empty"));
        }
        for (id, w) in &entries {
            if !w.is_finite() || *w <= 0.0 {
                return Err(config_err(format!(
                    "adapter mix weight for {id:?} must be positive, got {w}"
                )));
            }
        }
        Ok(AdapterMix { entries })
    }

    pub fn uniform(ids: &[Option<&str>]) -> Self {
        let entries = ids.iter().map(|id| (id.map(str::to_string), 1.0)).collect();
        AdapterMix::new(entries).expect("uniform mix is valid")
    }

    fn draw(&self, rng: &mut SeededRng) -> Option<String> {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        let mut u = rng.next_uniform() * total;
        for (id, w) in &self.entries {
            if u < *w {
                return id.clone();
            }
            u -= w;
        }
        self.entries.last().expect("mix nonempty").0.clone()
    }
}

/// Per-mode default mix when the config lists no adapters and the caller
/// passes none.
fn default_mix(cfg: &RunConfig) -> AdapterMix {
    if !cfg.workload.adapters.is_empty() {
        let entries = cfg
            .workload
            .adapters
            .iter()
            .map(|id| (Some(id.clone()), 1.0))
            .collect();
        return AdapterMix::new(entries).expect("listed adapters form a valid mix");
    }
    match cfg.mode {
        RunMode::Infer | RunMode::Finetune => {
            AdapterMix::uniform(&[Some("srv-0"), Some("srv-1"), None])
        }
        RunMode::Unified => AdapterMix::uniform(&[Some("ada-0"), Some("ada-1"), None]),
        RunMode::Mutable => AdapterMix::uniform(&[Some("ada-main"), None]),
    }
}

/// Generate a deterministic workload.
///
/// `infer`: `requests` Poisson arrivals at `rps`, a mix of prefill and
/// evaluate over `mix` (default: two serving adapters and the bare base).
/// `finetune`: `requests` bounded training jobs arriving at time zero.
/// `unified`: two bounded jobs at time zero plus the `infer` stream over
/// their adapters.
/// `mutable`: one unbounded job plus four Poisson phases at
/// `rps * {1, 2.5, 2, 1}` per [`MUTABLE_PHASES`]; `requests` is ignored.
pub fn generate_workload(
    cfg: &RunConfig,
    rps: f64,
    requests: usize,
    mix: Option<&AdapterMix>,
) -> Result<Vec<TraceRecord>, HarnessError> {
    if rps <= 0.0 || !rps.is_finite() {
        return Err(config_err(format!("rps must be positive, got {rps}")));
    }
    let resolved;
    let mix = match mix {
        Some(m) => m,
        None => {
            resolved = default_mix(cfg);
            &resolved
        }
    };
    let mut rng = SeededRng::derive(cfg.seed, "workload");
    let mut records = Vec::new();
    match cfg.mode {
        RunMode::Infer => {
            gen_inference_stream(&mut rng, &mut records, rps, requests, 0, u64::MAX, mix);
        }
        RunMode::Finetune => {
            let jobs = requests.max(1);
            for j in 0..jobs {
                records.push(TraceRecord {
                    id: format!("job-{j}"),
                    arrival_ms: 0,
                    kind: TraceKind::Finetune,
                    adapter_id: Some(format!("ada-{j}")),
                    prompt_len: 0,
                    max_new_tokens: 0,
                    label_len: None,
                    train_steps: Some(16),
                    dynamic_scale: None,
                });
            }
        }
        RunMode::Unified => {
            for j in 0..2 {
                records.push(TraceRecord {
                    id: format!("job-{j}"),
                    arrival_ms: 0,
                    kind: TraceKind::Finetune,
                    adapter_id: Some(format!("ada-{j}")),
                    prompt_len: 0,
                    max_new_tokens: 0,
                    label_len: None,
                    train_steps: Some(50),
                    dynamic_scale: None,
                });
            }
            gen_inference_stream(&mut rng, &mut records, rps, requests, 0, u64::MAX, mix);
        }
        RunMode::Mutable => {
            records.push(TraceRecord {
                id: "job-main".into(),
                arrival_ms: 0,
                kind: TraceKind::Finetune,
                adapter_id: Some("ada-main".into()),
                prompt_len: 0,
                max_new_tokens: 0,
                label_len: None,
                train_steps: None,
                dynamic_scale: None,
            });
            for (start, duration, mult) in MUTABLE_PHASES {
                gen_inference_stream(
                    &mut rng,
                    &mut records,
                    rps * mult,
                    usize::MAX,
                    start,
                    start + duration,
                    mix,
                );
            }
        }
    }
    Ok(records)
}

/// Append Poisson inference arrivals in `[start_ms, end_ms)`, stopping
/// after `max_n` records.
fn gen_inference_stream(
    rng: &mut SeededRng,
    records: &mut Vec<TraceRecord>,
    rps: f64,
    max_n: usize,
    start_ms: u64,
    end_ms: u64,
    mix: &AdapterMix,
) {
    let mut t = start_ms as f64;
    let mut n = 0usize;
    while n < max_n {
        t += rng.next_exponential(rps) * 1000.0;
        let arrival = t as u64;
        if arrival >= end_ms {
            break;
        }
        let prompt_len = 4 + rng.next_below(9) as usize;
        let adapter = mix.draw(rng);
        // Every eighth request evaluates instead of generating.
        let rec = if rng.next_below(8) == 0 {
            TraceRecord {
                id: format!("req-{start_ms}-{n}"),
                arrival_ms: arrival,
                kind: TraceKind::Evaluate,
                adapter_id: adapter,
                prompt_len,
                max_new_tokens: 0,
                label_len: Some((prompt_len - 1).min(4)),
                train_steps: None,
                dynamic_scale: None,
            }
        } else {
            TraceRecord {
                id: format!("req-{start_ms}-{n}"),
                arrival_ms: arrival,
                kind: TraceKind::Prefill,
                adapter_id: adapter,
                prompt_len,
                max_new_tokens: 4 + rng.next_below(13) as usize,
                label_len: None,
                train_steps: None,
                dynamic_scale: None,
            }
        };
        records.push(rec);
        n += 1;
    }
}

/// Count of verdicts per violated clause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ViolationCounts {
    pub waiting: u64,
    pub mean_decode: u64,
    pub max_decode: u64,
}

/// End-of-run totals, serialized as the summary record.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub total_requests: u64,
    pub finished_requests: u64,
    pub attained_requests: u64,
    pub slo_attainment: f64,
    pub violations: ViolationCounts,
    pub decode_tokens: u64,
    pub finetune_tokens: u64,
    pub eval_tokens: u64,
    pub train_jobs: u64,
    pub optimizer_steps: u64,
    pub final_clock_ms: u64,
    pub steps: u64,
}

/// Everything replay produces; the runtime is kept for inspection.
pub struct ReplayRun<S> {
    pub runtime: Runtime<S>,
    pub metrics_csv: String,
    pub requests_csv: String,
    pub summary: RunSummary,
}

/// Hard cap on scheduler steps so a malformed replay cannot spin forever.
const MAX_REPLAY_STEPS: u64 = 2_000_000;

/// Build a runtime for `cfg`: seeded base weights, empty registries.
pub fn build_runtime<S: Scalar>(cfg: &RunConfig) -> Result<Runtime<S>, HarnessError> {
    cfg.validate()?;
    let base = BaseWeights::<S>::init_seeded(cfg.model, cfg.seed)
        .map_err(|e| config_err(e.to_string()))?;
    let vm = VirtualModel::from_arc(std::sync::Arc::new(base));
    Ok(Runtime::new(vm, cfg.scheduler, cfg.slo.to_policy())?)
}

fn submission_of(cfg: &RunConfig, rec: &TraceRecord) -> InferenceSubmission {
    let kind = match rec.kind {
        TraceKind::Prefill => RequestKind::Generate,
        TraceKind::Evaluate => RequestKind::Evaluate,
        TraceKind::Finetune => unreachable!("finetune records register jobs"),
    };
    InferenceSubmission {
        id: rec.id.clone(),
        arrival_ms: rec.arrival_ms,
        kind,
        adapter_id: rec.adapter_id.clone(),
        prompt: synth_tokens(cfg.seed, &rec.id, rec.prompt_len, cfg.model.vocab_size),
        max_new_tokens: rec.max_new_tokens,
        label_tail: rec.label_len,
        dynamic_scale: rec.dynamic_scale,
    }
}

fn train_spec_of(cfg: &RunConfig, rec: &TraceRecord) -> Result<TrainJobSpec, HarnessError> {
    Ok(TrainJobSpec {
        job_id: rec.id.clone(),
        adapter_id: rec
            .adapter_id
            .clone()
            .expect("parse enforces finetune adapter_id"),
        total_steps: rec.train_steps,
        seq_len: cfg.training.seq_len,
        rank: cfg.training.rank,
        alpha: cfg.training.alpha,
        dropout: cfg.training.dropout,
        targets: cfg.training.target_linears()?,
        hyper: cfg.training.hyper()?,
        seed: cfg.seed,
    })
}

/// Serving adapters a trace references without training them; replay
/// provisions these before the clock starts.
fn untrained_adapter_ids(trace: &[TraceRecord]) -> Vec<String> {
    let trained: BTreeSet<&str> = trace
        .iter()
        .filter(|r| r.kind == TraceKind::Finetune)
        .filter_map(|r| r.adapter_id.as_deref())
        .collect();
    let mut out = BTreeSet::new();
    for rec in trace {
        if rec.kind == TraceKind::Finetune {
            continue;
        }
        if let Some(id) = rec.adapter_id.as_deref() {
            if !trained.contains(id) {
                out.insert(id.to_string());
            }
        }
    }
    out.into_iter().collect()
}

/// Replay `trace` against a fresh runtime and collect every output file.
pub fn replay<S: Scalar>(cfg: &RunConfig, trace: &[TraceRecord]) -> Result<ReplayRun<S>, HarnessError> {
    let mut runtime = build_runtime::<S>(cfg)?;
    let targets = cfg.training.target_linears()?;
    for id in untrained_adapter_ids(trace) {
        runtime.provision_serving_adapter(
            &id,
            cfg.training.rank,
            cfg.training.alpha,
            cfg.training.dropout,
            &targets,
            cfg.seed,
        )?;
    }

    let mut cursor = 0usize;
    let mut steps = 0u64;
    while cursor < trace.len() || runtime.has_pending_work() {
        while cursor < trace.len() && trace[cursor].arrival_ms <= runtime.now_ms() {
            let rec = &trace[cursor];
            match rec.kind {
                TraceKind::Finetune => {
                    runtime.register_train_job(train_spec_of(cfg, rec)?)?;
                }
                _ => {
                    runtime.submit_inference(submission_of(cfg, rec))?;
                }
            }
            cursor += 1;
        }
        runtime.step()?;
        steps += 1;
        if steps > MAX_REPLAY_STEPS {
            return Err(config_err(format!(
                "replay exceeded {MAX_REPLAY_STEPS} steps without draining"
            )));
        }
    }

    let hash = cfg.content_hash();
    let metrics_csv = runtime.ledger().to_csv(hash);
    let requests_csv = requests_csv(&runtime, hash);
    let summary = summarize(&runtime, hash, steps);
    Ok(ReplayRun {
        runtime,
        metrics_csv,
        requests_csv,
        summary,
    })
}

fn requests_csv<S: Scalar>(runtime: &Runtime<S>, config_hash: u64) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash:016x}");
    out.push_str(
        "id,kind,adapter,arrival_ms,first_scheduled_ms,finished_ms,waiting_ms,\
         tokens,mean_decode_ms,max_decode_ms,eval_loss,attained,violation\n",
    );
    for r in runtime.request_reports() {
        let kind = match r.kind {
            RequestKind::Generate => "prefill",
            RequestKind::Evaluate => "evaluate",
        };
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (waiting, mean, max, attained, violation) = match r.outcome {
            Some(o) => (
                o.waiting_ms.to_string(),
                format!("{:.3}", o.mean_decode_ms),
                o.max_decode_ms.to_string(),
                o.attained.to_string(),
                o.violation.map(|v| v.name()).unwrap_or("").to_string(),
            ),
            None => Default::default(),
        };
        let eval_loss = r
            .eval_loss
            .map(|l| format!("{l:.6}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            kind,
            r.adapter_id.as_deref().unwrap_or(""),
            r.arrival_ms,
            opt(r.first_scheduled_ms),
            opt(r.finished_ms),
            waiting,
            r.generated.len(),
            mean,
            max,
            eval_loss,
            attained,
            violation,
        );
    }
    out
}

fn summarize<S: Scalar>(runtime: &Runtime<S>, config_hash: u64, steps: u64) -> RunSummary {
    let totals = runtime.ledger().totals();
    let mut violations = ViolationCounts::default();
    for r in runtime.request_reports() {
        if let Some(v) = r.outcome.and_then(|o| o.violation) {
            match v {
                crate::runtime::SloViolation::Waiting => violations.waiting += 1,
                crate::runtime::SloViolation::MeanDecode => violations.mean_decode += 1,
                crate::runtime::SloViolation::MaxDecode => violations.max_decode += 1,
            }
        }
    }
    RunSummary {
        config_hash: format!("{config_hash:016x}"),
        total_requests: totals.arrivals,
        finished_requests: totals.finished,
        attained_requests: totals.attained,
        slo_attainment: totals.attainment(),
        violations,
        decode_tokens: totals.decode_tokens,
        finetune_tokens: totals.finetune_tokens,
        eval_tokens: totals.eval_tokens,
        train_jobs: runtime.train_job_ids().len() as u64,
        optimizer_steps: runtime.optimizer_steps_total(),
        final_clock_ms: runtime.now_ms(),
        steps,
    }
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

/// Per-job outcome of a migration rehearsal.
#[derive(Debug, Clone, Serialize)]
pub struct MigrationRow {
    pub job_id: String,
    pub adapter_hash_straight: String,
    pub adapter_hash_migrated: String,
    pub trainer_hash_straight: String,
    pub trainer_hash_migrated: String,
    pub matches: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MigrationReport {
    pub config_hash: String,
    pub split_at_step: u64,
    pub bundle_bytes: u64,
    pub rows: Vec<MigrationRow>,
    pub all_match: bool,
}

impl MigrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Run a fine-tune-only trace twice: once straight through, once split in
/// the middle by voiding every job to bundle bytes and unvoiding them into
/// a fresh runtime. Returns per-job hash comparisons plus the bundles.
pub fn run_migration<S: Scalar>(
    cfg: &RunConfig,
    trace: &[TraceRecord],
) -> Result<(MigrationReport, Vec<(String, Vec<u8>)>), HarnessError> {
    if trace.is_empty() {
        return Err(config_err("migration needs at least one finetune record"));
    }
    for rec in trace {
        if rec.kind != TraceKind::Finetune {
            return Err(config_err(format!(
                "migration traces must be finetune-only; {:?} is {:?}",
                rec.id, rec.kind
            )));
        }
        if rec.train_steps.is_none() {
            return Err(config_err(format!(
                "migration job {:?} needs bounded train_steps",
                rec.id
            )));
        }
        if rec.arrival_ms != 0 {
            return Err(config_err(format!(
                "migration job {:?} must arrive at time zero",
                rec.id
            )));
        }
    }

    // Straight run, counting steps until the work drains.
    let mut straight = build_runtime::<S>(cfg)?;
    for rec in trace {
        straight.register_train_job(train_spec_of(cfg, rec)?)?;
    }
    let mut total_steps = 0u64;
    while straight.has_pending_work() {
        straight.step()?;
        total_steps += 1;
        if total_steps > MAX_REPLAY_STEPS {
            return Err(config_err("migration run did not drain"));
        }
    }

    // Split run: half the steps, void every job, resume elsewhere.
    let split_at = total_steps / 2;
    let mut first = build_runtime::<S>(cfg)?;
    for rec in trace {
        first.register_train_job(train_spec_of(cfg, rec)?)?;
    }
    for _ in 0..split_at {
        first.step()?;
    }
    let mut bundles = Vec::new();
    for job_id in first.train_job_ids() {
        let bytes = first.export_job(&job_id)?;
        bundles.push((job_id, bytes));
    }
    let mut second = build_runtime::<S>(cfg)?;
    for (_, bytes) in &bundles {
        second.import_job(bytes)?;
    }
    let mut resumed_steps = 0u64;
    while second.has_pending_work() {
        second.step()?;
        resumed_steps += 1;
        if resumed_steps > MAX_REPLAY_STEPS {
            return Err(config_err("resumed migration run did not drain"));
        }
    }

    let mut rows = Vec::new();
    for rec in trace {
        let job_id = rec.id.clone();
        let adapter_id = rec.adapter_id.clone().unwrap();
        let s_inst = straight.vm().instance(&adapter_id).expect("straight instance");
        let m_inst = second.vm().instance(&adapter_id).expect("migrated instance");
        let s = (
            s_inst.adapter.content_hash(),
            s_inst.trainer.as_ref().unwrap().state_hash(),
        );
        let m = (
            m_inst.adapter.content_hash(),
            m_inst.trainer.as_ref().unwrap().state_hash(),
        );
        rows.push(MigrationRow {
            job_id,
            adapter_hash_straight: format!("{:016x}", s.0),
            adapter_hash_migrated: format!("{:016x}", m.0),
            trainer_hash_straight: format!("{:016x}", s.1),
            trainer_hash_migrated: format!("{:016x}", m.1),
            matches: s == m,
        });
    }
    let all_match = rows.iter().all(|r| r.matches);
    let bundle_bytes = bundles.iter().map(|(_, b)| b.len() as u64).sum();
    Ok((
        MigrationReport {
            config_hash: format!("{:016x}", cfg.content_hash()),
            split_at_step: split_at,
            bundle_bytes,
            rows,
            all_match,
        },
        bundles,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            model: ModelConfig::test_tiny(8, 1),
            scheduler: SchedulerConfig {
                row_budget: 16,
                ft_interleave: 1,
                step_ms: 100,
                bucket_ms: 1_000,
            },
            training: TrainingSection {
                rank: 2,
                alpha: 4.0,
                seq_len: 4,
                targets: vec!["q".into(), "v".into()],
                accumulation_steps: 2,
                ..TrainingSection::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let cfg = RunConfig {
            mode: RunMode::Unified,
            ..tiny_config()
        };
        let records = generate_workload(&cfg, 2.0, 12, None).unwrap();
        assert!(records.len() > 2);
        let text = trace_to_jsonl(&records);
        let parsed = parse_trace(&text).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn parse_reports_line_numbers_and_skips_comments() {
        let text = "# header\n\n{\"id\":\"a\",\"arrival_ms\":0,\"kind\":\"prefill\",\"prompt_len\":3,\"max_new_tokens\":2}\nnot json\n";
        let err = parse_trace(text).unwrap_err();
        match err {
            HarnessError::Trace { line, .. } => assert_eq!(line, 4),
            other => panic!("wrong error {other:?}"),
        }
        let ok = parse_trace("# only comments\n").unwrap();
        assert!(ok.is_empty());
    }

    #[test]
    fn parse_rejects_contract_violations() {
        let decreasing = "{\"id\":\"a\",\"arrival_ms\":5,\"kind\":\"prefill\",\"prompt_len\":1,\"max_new_tokens\":1}\n{\"id\":\"b\",\"arrival_ms\":4,\"kind\":\"prefill\",\"prompt_len\":1,\"max_new_tokens\":1}";
        assert!(matches!(
            parse_trace(decreasing),
            Err(HarnessError::Trace { line: 2, .. })
        ));
        let dup = "{\"id\":\"a\",\"arrival_ms\":0,\"kind\":\"prefill\",\"prompt_len\":1,\"max_new_tokens\":1}\n{\"id\":\"a\",\"arrival_ms\":1,\"kind\":\"prefill\",\"prompt_len\":1,\"max_new_tokens\":1}";
        assert!(parse_trace(dup).is_err());
        let bad_eval = "{\"id\":\"e\",\"arrival_ms\":0,\"kind\":\"evaluate\",\"prompt_len\":1}";
        assert!(parse_trace(bad_eval).is_err());
        let bad_ft = "{\"id\":\"f\",\"arrival_ms\":0,\"kind\":\"finetune\"}";
        assert!(parse_trace(bad_ft).is_err());
    }

    #[test]
    fn csv_converter_matches_jsonl_records() {
        let cfg = RunConfig {
            mode: RunMode::Unified,
            ..tiny_config()
        };
        let records = generate_workload(&cfg, 3.0, 8, None).unwrap();
        let mut csv = String::from("# converted\n");
        csv.push_str(TRACE_CSV_HEADER);
        csv.push('\n');
        for r in &records {
            let opt_s = |v: Option<&String>| v.cloned().unwrap_or_default();
            let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
            let kind = match r.kind {
                TraceKind::Prefill => "prefill",
                TraceKind::Evaluate => "evaluate",
                TraceKind::Finetune => "finetune",
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.arrival_ms,
                kind,
                opt_s(r.adapter_id.as_ref()),
                r.prompt_len,
                r.max_new_tokens,
                opt_u(r.label_len.map(|v| v as u64)),
                opt_u(r.train_steps),
                r.dynamic_scale.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        let parsed = parse_trace_csv(&csv).unwrap();
        assert_eq!(parsed, records);

        let bad = format!("{TRACE_CSV_HEADER}\nonly,three,cells\n");
        assert!(matches!(
            parse_trace_csv(&bad),
            Err(HarnessError::Trace { line: 2, .. })
        ));
    }

    #[test]
    fn adapter_mix_validates_weights() {
        assert!(AdapterMix::new(vec![]).is_err());
        assert!(AdapterMix::new(vec![(None, 0.0)]).is_err());
        assert!(AdapterMix::new(vec![(Some("a".into()), -1.0)]).is_err());
        let mix = AdapterMix::new(vec![(Some("a".into()), 3.0), (None, 1.0)]).unwrap();
        let mut rng = SeededRng::new(9);
        let mut hits = 0;
        for _ in 0..4_000 {
            if mix.draw(&mut rng).is_some() {
                hits += 1;
            }
        }
        // 3:1 weighting puts ~75% of draws on the named adapter.
        assert!((2_800..3_200).contains(&hits), "hits {hits}");
    }

    #[test]
    fn workload_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = generate_workload(&cfg, 1.5, 20, None).unwrap();
        let b = generate_workload(&cfg, 1.5, 20, None).unwrap();
        assert_eq!(a, b);
        let other = RunConfig {
            seed: 43,
            ..tiny_config()
        };
        let c = generate_workload(&other, 1.5, 20, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_inter_arrivals_match_rate() {
        let cfg = RunConfig {
            mode: RunMode::Infer,
            ..RunConfig::default()
        };
        let records = generate_workload(&cfg, 1.0, 10_000, None).unwrap();
        assert_eq!(records.len(), 10_000);
        let mean = records.last().unwrap().arrival_ms as f64 / records.len() as f64;
        assert!(
            (mean - 1000.0).abs() < 30.0,
            "mean inter-arrival {mean} off by more than 3%"
        );
    }

    #[test]
    fn empty_config_file_is_valid_and_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.slo.to_policy().max_waiting_ms, 6_000);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml_str("[model]\nvocab_sise = 3").is_err());
        assert!(RunConfig::from_toml_str("[training]\nrank = 0").is_err());
        assert!(RunConfig::from_toml_str("[training]\ntargets = [\"zz\"]").is_err());
        assert!(RunConfig::from_toml_str("[slo]\nmax_waiting_s = -1.0").is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = tiny_config();
        let mut b = tiny_config();
        assert_eq!(a.content_hash(), b.content_hash());
        b.scheduler.row_budget += 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn replay_of_empty_trace_reports_zero_totals() {
        let cfg = tiny_config();
        let run = replay::<f64>(&cfg, &[]).unwrap();
        assert_eq!(run.summary.total_requests, 0);
        assert_eq!(run.summary.finished_requests, 0);
        assert_eq!(run.summary.slo_attainment, 1.0);
        assert_eq!(run.summary.steps, 0);
    }

    #[test]
    fn replay_drains_a_unified_workload_deterministically() {
        let cfg = RunConfig {
            mode: RunMode::Unified,
            ..tiny_config()
        };
        let trace = generate_workload(&cfg, 4.0, 10, None).unwrap();
        let a = replay::<f64>(&cfg, &trace).unwrap();
        let b = replay::<f64>(&cfg, &trace).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.requests_csv, b.requests_csv);
        assert_eq!(a.summary.to_json(), b.summary.to_json());
        assert_eq!(a.summary.finished_requests, 10);
        assert!(a.summary.optimizer_steps > 0);
        assert!(a.metrics_csv.starts_with("# config_hash="));
        let header = a.metrics_csv.lines().nth(1).unwrap();
        assert_eq!(header, "bucket_start_ms,rps,dtps,ftps,etps,slo_attainment_cum");
    }

    #[test]
    fn replay_provisions_untrained_adapters() {
        let cfg = RunConfig {
            mode: RunMode::Infer,
            ..tiny_config()
        };
        let trace = vec![TraceRecord {
            id: "r0".into(),
            arrival_ms: 0,
            kind: TraceKind::Prefill,
            adapter_id: Some("srv-9".into()),
            prompt_len: 3,
            max_new_tokens: 2,
            label_len: None,
            train_steps: None,
            dynamic_scale: None,
        }];
        let run = replay::<f64>(&cfg, &trace).unwrap();
        assert_eq!(run.summary.finished_requests, 1);
        assert!(run.runtime.vm().instance("srv-9").is_some());
    }

    #[test]
    fn migration_rehearsal_matches_straight_run() {
        let cfg = RunConfig {
            mode: RunMode::Finetune,
            ..tiny_config()
        };
        let trace = vec![
            TraceRecord {
                id: "job-0".into(),
                arrival_ms: 0,
                kind: TraceKind::Finetune,
                adapter_id: Some("ada-0".into()),
                prompt_len: 0,
                max_new_tokens: 0,
                label_len: None,
                train_steps: Some(5),
                dynamic_scale: None,
            },
            TraceRecord {
                id: "job-1".into(),
                arrival_ms: 0,
                kind: TraceKind::Finetune,
                adapter_id: Some("ada-1".into()),
                prompt_len: 0,
                max_new_tokens: 0,
                label_len: None,
                train_steps: Some(5),
                dynamic_scale: None,
            },
        ];
        let (report, bundles) = run_migration::<f64>(&cfg, &trace).unwrap();
        assert!(report.all_match, "{}", report.to_json());
        assert_eq!(report.rows.len(), 2);
        assert_eq!(bundles.len(), 2);
        assert!(report.bundle_bytes > 0);
    }

    #[test]
    fn migration_rejects_inference_records() {
        let cfg = tiny_config();
        let trace = vec![TraceRecord {
            id: "r".into(),
            arrival_ms: 0,
            kind: TraceKind::Prefill,
            adapter_id: None,
            prompt_len: 2,
            max_new_tokens: 1,
            label_len: None,
            train_steps: None,
            dynamic_scale: None,
        }];
        assert!(matches!(
            run_migration::<f64>(&cfg, &trace),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn mutable_workload_covers_all_phases() {
        let cfg = RunConfig {
            mode: RunMode::Mutable,
            model: ModelConfig::test_tiny(8, 1),
            ..RunConfig::default()
        };
        let trace = generate_workload(&cfg, 1.0, 0, None).unwrap();
        assert_eq!(trace[0].kind, TraceKind::Finetune);
        assert!(trace[0].train_steps.is_none());
        let last = trace.last().unwrap();
        assert!(last.arrival_ms >= 300_000 && last.arrival_ms < 420_000);
        // Phase 2 runs hotter than phase 1.
        let in_window = |lo: u64, hi: u64| {
            trace
                .iter()
                .filter(|r| r.kind != TraceKind::Finetune)
                .filter(|r| r.arrival_ms >= lo && r.arrival_ms < hi)
                .count() as f64
        };
        let phase1_rate = in_window(0, 120_000) / 120.0;
        let phase2_rate = in_window(120_000, 180_000) / 60.0;
        assert!(phase2_rate > phase1_rate * 1.5);
    }
}

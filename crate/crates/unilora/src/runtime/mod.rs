//! Request admission, capacity allocation, the unified step loop, and SLO
//! accounting, all on a virtual clock.
//!
//! The runtime owns a [`VirtualModel`] registry, a KV-cache slab, the
//! inference queues, and the fine-tuning jobs. Each [`Runtime::step`] call
//! advances the clock by one fixed tick: it splits the row budget
//! (decode > prefill/eval > fine-tune), packs one unified batch, runs the
//! shared forward, feeds decode tokens back, and drives each scheduled
//! trainer one micro-batch forward. Everything is deterministic: two runs
//! over the same submissions produce identical ledgers byte for byte.
//!
//! Timing convention: scheduling decisions happen at the step start `now`;
//! work produced by the step (tokens, losses, finishes) is stamped at
//! `now + step_ms`. A request's waiting time is `first_scheduled - arrival`,
//! and its decode latency is the gap sequence between consecutive token
//! emissions.

pub mod metrics;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{
    assemble_batch, compute_losses, finetune_loss_backward, flow_backward, flow_forward,
    FlowError, JobSpec,
};
use crate::lora::{validate_dynamic_scale, LoraAdapter, LoraError, TargetLinear};
use crate::model::forward::greedy_pick;
use crate::model::kv::KvCache;
use crate::model::ModelError;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, TokenId, IGNORE_ID};
use crate::train::{micro_batch_tokens, TrainHyper, Trainer};
use crate::vm::{AdapterInstance, VirtualModel, VmError};

pub use metrics::{MetricsLedger, MetricsRow, Totals};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unknown adapter {0:?}")]
    UnknownAdapter(String),
    #[error("duplicate request id {0:?}")]
    DuplicateRequest(String),
    #[error("duplicate train job {0:?}")]
    DuplicateTrainJob(String),
    #[error("unknown train job {0:?}")]
    UnknownTrainJob(String),
    #[error("adapter {id:?} still has {active} live inference request(s)")]
    AdapterBusy { id: String, active: usize },
    #[error("adapter {0:?} belongs to a train job; export the job instead")]
    JobOwnsAdapter(String),
    #[error("request {0:?}: empty prompt")]
    EmptyPrompt(String),
    #[error("request {id:?}: needs at least {need} prompt tokens, got {got}")]
    PromptTooShort { id: String, need: usize, got: usize },
    #[error("request {id:?}: prompt {prompt} plus {max_new} new tokens exceeds max_seq {max_seq}")]
    SequenceBudget {
        id: String,
        prompt: usize,
        max_new: usize,
        max_seq: usize,
    },
    #[error("request {id:?}: token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: String, token: TokenId, vocab: usize },
    #[error("request {0:?}: max_new_tokens must be >= 1")]
    NoTokensRequested(String),
    #[error("request {id:?}: label tail {tail} invalid for prompt length {len}")]
    BadLabelTail { id: String, tail: usize, len: usize },
    #[error("scheduler config: {0}")]
    BadConfig(String),
    #[error("job bundle: {0}")]
    BadJobBundle(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// SLO thresholds, all in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloPolicy {
    pub max_waiting_ms: u64,
    pub mean_decode_ms: f64,
    pub max_decode_ms: u64,
}

impl Default for SloPolicy {
    fn default() -> Self {
        SloPolicy {
            max_waiting_ms: 6_000,
            mean_decode_ms: 200.0,
            max_decode_ms: 1_000,
        }
    }
}

/// First violated SLO clause; clauses are checked waiting first, then mean
/// decode latency, then max decode latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloViolation {
    Waiting,
    MeanDecode,
    MaxDecode,
}

impl SloViolation {
    pub fn name(self) -> &'static str {
        match self {
            SloViolation::Waiting => "waiting",
            SloViolation::MeanDecode => "mean_decode",
            SloViolation::MaxDecode => "max_decode",
        }
    }
}

/// Verdict for one finished request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SloOutcome {
    pub attained: bool,
    pub violation: Option<SloViolation>,
    pub waiting_ms: u64,
    pub mean_decode_ms: f64,
    pub max_decode_ms: u64,
}

/// Judge a finished request: `gaps_ms` are the inter-token decode gaps
/// (empty for single-token and evaluation requests).
pub fn slo_verdict(policy: &SloPolicy, waiting_ms: u64, gaps_ms: &[u64]) -> SloOutcome {
    let mean = if gaps_ms.is_empty() {
        0.0
    } else {
        gaps_ms.iter().sum::<u64>() as f64 / gaps_ms.len() as f64
    };
    let max = gaps_ms.iter().copied().max().unwrap_or(0);
    let violation = if waiting_ms > policy.max_waiting_ms {
        Some(SloViolation::Waiting)
    } else if mean > policy.mean_decode_ms {
        Some(SloViolation::MeanDecode)
    } else if max > policy.max_decode_ms {
        Some(SloViolation::MaxDecode)
    } else {
        None
    };
    SloOutcome {
        attained: violation.is_none(),
        violation,
        waiting_ms,
        mean_decode_ms: mean,
        max_decode_ms: max,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Rows one step may pack into the unified batch.
    pub row_budget: usize,
    /// Fine-tune rows are eligible only when `step_index % ft_interleave == 0`.
    pub ft_interleave: u64,
    /// Virtual milliseconds one step takes.
    pub step_ms: u64,
    /// Metrics bucket width.
    pub bucket_ms: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            row_budget: 256,
            ft_interleave: 4,
            step_ms: 100,
            bucket_ms: 1_000,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.row_budget < 1 {
            return Err(RuntimeError::BadConfig("row_budget must be >= 1".into()));
        }
        if self.ft_interleave < 1 {
            return Err(RuntimeError::BadConfig("ft_interleave must be >= 1".into()));
        }
        if self.step_ms < 1 {
            return Err(RuntimeError::BadConfig("step_ms must be >= 1".into()));
        }
        if self.bucket_ms < 1 {
            return Err(RuntimeError::BadConfig("bucket_ms must be >= 1".into()));
        }
        Ok(())
    }
}

/// Row split for one step. Decode slots are rows (one row per decode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapacityPlan {
    pub decode_slots: usize,
    pub prefill_rows: usize,
    pub finetune_rows: usize,
}

/// Monotone budget split: decodes first, queued prefill/eval rows next,
/// fine-tuning takes the floor-0 remainder. More pending inference work can
/// never increase the fine-tune share.
pub fn allocate_capacity(
    budget: usize,
    pending_decodes: usize,
    pending_prefill_rows: usize,
    ft_eligible: bool,
) -> CapacityPlan {
    let decode_slots = pending_decodes.min(budget);
    let rem = budget - decode_slots;
    let prefill_rows = pending_prefill_rows.min(rem);
    let finetune_rows = if ft_eligible { rem - prefill_rows } else { 0 };
    CapacityPlan {
        decode_slots,
        prefill_rows,
        finetune_rows,
    }
}

/// Arrival kind of an inference request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    /// Prefill once, then decode up to `max_new_tokens`.
    Generate,
    /// One prefill-shaped pass that reports a loss and retires.
    Evaluate,
}

/// One inference request as handed to [`Runtime::submit_inference`].
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSubmission {
    pub id: String,
    pub arrival_ms: u64,
    pub kind: RequestKind,
    pub adapter_id: Option<String>,
    pub prompt: Vec<TokenId>,
    /// Total tokens to generate (first token included). Ignored for eval.
    pub max_new_tokens: usize,
    /// Evaluate only: score just the last N label positions.
    pub label_tail: Option<usize>,
    pub dynamic_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Queued,
    Decoding,
    Done,
}

#[derive(Debug, Clone)]
struct RequestState {
    sub: InferenceSubmission,
    phase: Phase,
    first_scheduled_ms: Option<u64>,
    emit_times: Vec<u64>,
    generated: Vec<TokenId>,
    cache_slot: Option<usize>,
    eval_loss: Option<f64>,
    finished_ms: Option<u64>,
    outcome: Option<SloOutcome>,
}

/// Public snapshot of one request for reports and verdict files.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestReport {
    pub id: String,
    pub kind: RequestKind,
    pub adapter_id: Option<String>,
    pub arrival_ms: u64,
    pub first_scheduled_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub generated: Vec<TokenId>,
    pub eval_loss: Option<f64>,
    pub outcome: Option<SloOutcome>,
}

/// Identity and extent of one fine-tuning job; the trainer itself lives in
/// the adapter's [`AdapterInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJobConfig {
    pub job_id: String,
    pub adapter_id: String,
    /// Optimizer steps to run; `None` trains for the whole run.
    pub total_steps: Option<u64>,
    /// Rows one micro-batch occupies.
    pub seq_len: usize,
    pub data_seed: u64,
}

#[derive(Debug, Clone)]
struct TrainJob {
    cfg: TrainJobConfig,
    paused: bool,
}

/// Everything needed to admit a brand-new fine-tuning job.
#[derive(Debug, Clone)]
pub struct TrainJobSpec {
    pub job_id: String,
    pub adapter_id: String,
    pub total_steps: Option<u64>,
    pub seq_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<TargetLinear>,
    pub hyper: TrainHyper,
    /// Seeds adapter init, the dropout stream, and the data stream.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Running,
    Paused,
    Finished,
}

/// What one step did; row counts refer to the packed unified batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub step_index: u64,
    pub started_ms: u64,
    pub decode_rows: usize,
    pub prefill_rows: usize,
    pub eval_rows: usize,
    pub finetune_rows: usize,
    pub optimizer_steps: usize,
    pub finished_requests: usize,
    /// `(owner id, mean loss)` per fine-tune micro-batch and eval pass.
    pub losses: Vec<(String, f64)>,
}

impl StepReport {
    pub fn total_rows(&self) -> usize {
        self.decode_rows + self.prefill_rows + self.eval_rows + self.finetune_rows
    }
}

const JOB_BUNDLE_MAGIC: &[u8; 8] = b"UJOBV1\0\0";

#[derive(Serialize, Deserialize)]
struct JobExport {
    cfg: TrainJobConfig,
    paused: bool,
}

/// What one scheduled batch entry stands for, indexed by spec tag.
#[derive(Debug, Clone, Copy)]
enum Item {
    Decode(usize),
    Prefill(usize),
    Eval(usize),
    Micro(usize),
}

pub struct Runtime<S> {
    vm: VirtualModel<S>,
    sched: SchedulerConfig,
    slo: SloPolicy,
    step_index: u64,
    clock_ms: u64,
    requests: Vec<RequestState>,
    /// Waiting prefill/eval request indexes, FIFO by admission.
    queue: VecDeque<usize>,
    /// Actively decoding request indexes, rotated round-robin.
    decoding: VecDeque<usize>,
    caches: Vec<KvCache<S>>,
    free_cache_slots: Vec<usize>,
    jobs: Vec<TrainJob>,
    /// Round-robin start for fine-tune scheduling.
    ft_cursor: usize,
    ledger: MetricsLedger,
    optimizer_steps_total: u64,
}

impl<S: Scalar> Runtime<S> {
    pub fn new(
        vm: VirtualModel<S>,
        sched: SchedulerConfig,
        slo: SloPolicy,
    ) -> Result<Self, RuntimeError> {
        sched.validate()?;
        let ledger = MetricsLedger::new(sched.bucket_ms);
        Ok(Runtime {
            vm,
            sched,
            slo,
            step_index: 0,
            clock_ms: 0,
            requests: Vec::new(),
            queue: VecDeque::new(),
            decoding: VecDeque::new(),
            caches: Vec::new(),
            free_cache_slots: Vec::new(),
            jobs: Vec::new(),
            ft_cursor: 0,
            ledger,
            optimizer_steps_total: 0,
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn scheduler(&self) -> &SchedulerConfig {
        &self.sched
    }

    pub fn slo(&self) -> &SloPolicy {
        &self.slo
    }

    pub fn vm(&self) -> &VirtualModel<S> {
        &self.vm
    }

    pub fn vm_mut(&mut self) -> &mut VirtualModel<S> {
        &mut self.vm
    }

    pub fn ledger(&self) -> &MetricsLedger {
        &self.ledger
    }

    pub fn optimizer_steps_total(&self) -> u64 {
        self.optimizer_steps_total
    }

    /// True while any request is queued or decoding or any unpaused bounded
    /// job still has steps left.
    pub fn has_pending_work(&self) -> bool {
        if !self.queue.is_empty() || !self.decoding.is_empty() {
            return true;
        }
        (0..self.jobs.len()).any(|ji| {
            !self.jobs[ji].paused
                && self.jobs[ji].cfg.total_steps.is_some()
                && !self.job_finished(ji)
        })
    }

    pub fn request_report(&self, id: &str) -> Option<RequestReport> {
        self.requests
            .iter()
            .find(|r| r.sub.id == id)
            .map(Self::report_of)
    }

    /// All requests in admission order.
    pub fn request_reports(&self) -> Vec<RequestReport> {
        self.requests.iter().map(Self::report_of).collect()
    }

    fn report_of(r: &RequestState) -> RequestReport {
        RequestReport {
            id: r.sub.id.clone(),
            kind: r.sub.kind,
            adapter_id: r.sub.adapter_id.clone(),
            arrival_ms: r.sub.arrival_ms,
            first_scheduled_ms: r.first_scheduled_ms,
            finished_ms: r.finished_ms,
            generated: r.generated.clone(),
            eval_loss: r.eval_loss,
            outcome: r.outcome,
        }
    }

    pub fn submit_inference(&mut self, sub: InferenceSubmission) -> Result<(), RuntimeError> {
        if self.requests.iter().any(|r| r.sub.id == sub.id) {
            return Err(RuntimeError::DuplicateRequest(sub.id));
        }
        if let Some(id) = &sub.adapter_id {
            if self.vm.instance(id).is_none() {
                return Err(RuntimeError::UnknownAdapter(id.clone()));
            }
        }
        if let Some(scale) = sub.dynamic_scale {
            validate_dynamic_scale(scale)?;
        }
        if sub.prompt.is_empty() {
            return Err(RuntimeError::EmptyPrompt(sub.id));
        }
        let cfg = self.vm.config();
        for &t in &sub.prompt {
            if t as usize >= cfg.vocab_size {
                return Err(RuntimeError::TokenOutOfRange {
                    id: sub.id,
                    token: t,
                    vocab: cfg.vocab_size,
                });
            }
        }
        match sub.kind {
            RequestKind::Generate => {
                if sub.max_new_tokens < 1 {
                    return Err(RuntimeError::NoTokensRequested(sub.id));
                }
                // Final cache length is prompt + max_new - 1.
                if sub.prompt.len() + sub.max_new_tokens - 1 > cfg.max_seq {
                    return Err(RuntimeError::SequenceBudget {
                        id: sub.id,
                        prompt: sub.prompt.len(),
                        max_new: sub.max_new_tokens,
                        max_seq: cfg.max_seq,
                    });
                }
            }
            RequestKind::Evaluate => {
                if sub.prompt.len() < 2 {
                    return Err(RuntimeError::PromptTooShort {
                        id: sub.id,
                        need: 2,
                        got: sub.prompt.len(),
                    });
                }
                if sub.prompt.len() > cfg.max_seq {
                    return Err(RuntimeError::SequenceBudget {
                        id: sub.id,
                        prompt: sub.prompt.len(),
                        max_new: 0,
                        max_seq: cfg.max_seq,
                    });
                }
                if let Some(tail) = sub.label_tail {
                    if tail < 1 || tail > sub.prompt.len() - 1 {
                        return Err(RuntimeError::BadLabelTail {
                            id: sub.id,
                            tail,
                            len: sub.prompt.len(),
                        });
                    }
                }
            }
        }
        self.ledger.record_arrival(sub.arrival_ms);
        self.requests.push(RequestState {
            sub,
            phase: Phase::Queued,
            first_scheduled_ms: None,
            emit_times: Vec::new(),
            generated: Vec::new(),
            cache_slot: None,
            eval_loss: None,
            finished_ms: None,
            outcome: None,
        });
        self.queue.push_back(self.requests.len() - 1);
        Ok(())
    }

    /// Attach a fresh, deterministically initialized serving adapter.
    pub fn provision_serving_adapter(
        &mut self,
        id: &str,
        rank: usize,
        alpha: f64,
        dropout: f64,
        targets: &[TargetLinear],
        seed: u64,
    ) -> Result<(), RuntimeError> {
        let cfg = *self.vm.config();
        let mut rng = SeededRng::derive(seed, &format!("adapter-init.{id}"));
        let adapter = LoraAdapter::init_finetune(
            id,
            rank,
            alpha,
            dropout,
            targets,
            cfg.n_layers,
            cfg.hidden,
            cfg.mlp_hidden,
            &mut rng,
        );
        self.vm.attach(AdapterInstance::serving(adapter))?;
        Ok(())
    }

    /// Admit a new fine-tuning job: a fresh adapter plus trainer, attached
    /// as a training instance owned by this job.
    pub fn register_train_job(&mut self, spec: TrainJobSpec) -> Result<(), RuntimeError> {
        if self.jobs.iter().any(|j| j.cfg.job_id == spec.job_id) {
            return Err(RuntimeError::DuplicateTrainJob(spec.job_id));
        }
        if spec.seq_len < 2 {
            return Err(RuntimeError::BadConfig(format!(
                "train job {:?}: seq_len must be >= 2 for a shifted loss",
                spec.job_id
            )));
        }
        if spec.seq_len > self.sched.row_budget {
            return Err(RuntimeError::BadConfig(format!(
                "train job {:?}: seq_len {} exceeds row budget {}",
                spec.job_id, spec.seq_len, self.sched.row_budget
            )));
        }
        let cfg = *self.vm.config();
        let mut init_rng = SeededRng::derive(spec.seed, &format!("adapter-init.{}", spec.adapter_id));
        let adapter = LoraAdapter::init_finetune(
            spec.adapter_id.clone(),
            spec.rank,
            spec.alpha,
            spec.dropout,
            &spec.targets,
            cfg.n_layers,
            cfg.hidden,
            cfg.mlp_hidden,
            &mut init_rng,
        );
        let dropout_seed =
            crate::fnv1a64(format!("dropout.{}.{}", spec.seed, spec.adapter_id).as_bytes());
        let trainer = Trainer::new(&adapter, spec.hyper, dropout_seed);
        self.vm.attach(AdapterInstance::training(adapter, trainer))?;
        let data_seed = crate::fnv1a64(format!("data.{}.{}", spec.seed, spec.job_id).as_bytes());
        self.jobs.push(TrainJob {
            cfg: TrainJobConfig {
                job_id: spec.job_id,
                adapter_id: spec.adapter_id,
                total_steps: spec.total_steps,
                seq_len: spec.seq_len,
                data_seed,
            },
            paused: false,
        });
        Ok(())
    }

    fn job_index(&self, job_id: &str) -> Result<usize, RuntimeError> {
        self.jobs
            .iter()
            .position(|j| j.cfg.job_id == job_id)
            .ok_or_else(|| RuntimeError::UnknownTrainJob(job_id.to_string()))
    }

    fn trainer_of(&self, ji: usize) -> &Trainer<S> {
        self.vm
            .instance(&self.jobs[ji].cfg.adapter_id)
            .and_then(|inst| inst.trainer.as_ref())
            .expect("train job adapter must hold a trainer")
    }

    fn job_finished(&self, ji: usize) -> bool {
        match self.jobs[ji].cfg.total_steps {
            Some(n) => self.trainer_of(ji).optimizer_steps() >= n,
            None => false,
        }
    }

    fn job_active(&self, ji: usize) -> bool {
        !self.jobs[ji].paused && !self.job_finished(ji)
    }

    pub fn train_status(&self, job_id: &str) -> Result<TrainStatus, RuntimeError> {
        let ji = self.job_index(job_id)?;
        Ok(if self.job_finished(ji) {
            TrainStatus::Finished
        } else if self.jobs[ji].paused {
            TrainStatus::Paused
        } else {
            TrainStatus::Running
        })
    }

    pub fn job_optimizer_steps(&self, job_id: &str) -> Result<u64, RuntimeError> {
        let ji = self.job_index(job_id)?;
        Ok(self.trainer_of(ji).optimizer_steps())
    }

    pub fn train_job_ids(&self) -> Vec<String> {
        self.jobs.iter().map(|j| j.cfg.job_id.clone()).collect()
    }

    /// Pause takes effect at the current step boundary; the possibly
    /// half-filled accumulation window stays in the trainer.
    pub fn pause_job(&mut self, job_id: &str) -> Result<(), RuntimeError> {
        let ji = self.job_index(job_id)?;
        self.jobs[ji].paused = true;
        Ok(())
    }

    pub fn resume_job(&mut self, job_id: &str) -> Result<(), RuntimeError> {
        let ji = self.job_index(job_id)?;
        self.jobs[ji].paused = false;
        Ok(())
    }

    fn live_requests_on(&self, adapter_id: &str) -> usize {
        self.requests
            .iter()
            .filter(|r| {
                r.phase != Phase::Done && r.sub.adapter_id.as_deref() == Some(adapter_id)
            })
            .count()
    }

    /// Void a serving adapter into a migration bundle. Adapters owned by a
    /// train job must go through [`Runtime::export_job`].
    pub fn void_adapter(&mut self, adapter_id: &str) -> Result<Vec<u8>, RuntimeError> {
        if self.jobs.iter().any(|j| j.cfg.adapter_id == adapter_id) {
            return Err(RuntimeError::JobOwnsAdapter(adapter_id.to_string()));
        }
        let active = self.live_requests_on(adapter_id);
        if active > 0 {
            return Err(RuntimeError::AdapterBusy {
                id: adapter_id.to_string(),
                active,
            });
        }
        Ok(self.vm.void(adapter_id)?)
    }

    /// Rebind a previously voided serving adapter.
    pub fn unvoid_adapter(&mut self, bytes: &[u8]) -> Result<String, RuntimeError> {
        Ok(self.vm.unvoid(bytes)?)
    }

    /// Void a train job and its adapter into one self-contained bundle:
    /// job identity, pause flag, adapter pairs, and full trainer state.
    /// The job leaves this runtime; steps between export and import run
    /// without it.
    pub fn export_job(&mut self, job_id: &str) -> Result<Vec<u8>, RuntimeError> {
        let ji = self.job_index(job_id)?;
        let adapter_id = self.jobs[ji].cfg.adapter_id.clone();
        let active = self.live_requests_on(&adapter_id);
        if active > 0 {
            return Err(RuntimeError::AdapterBusy {
                id: adapter_id,
                active,
            });
        }
        let job = self.jobs.remove(ji);
        if self.ft_cursor > ji {
            self.ft_cursor -= 1;
        }
        if !self.jobs.is_empty() {
            self.ft_cursor %= self.jobs.len();
        } else {
            self.ft_cursor = 0;
        }
        let export = JobExport {
            cfg: job.cfg,
            paused: job.paused,
        };
        let header = serde_json::to_vec(&export).expect("job export serializes");
        let bundle = self.vm.void(&adapter_id)?;
        let mut out = Vec::with_capacity(8 + 4 + header.len() + bundle.len());
        out.extend_from_slice(JOB_BUNDLE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&bundle);
        Ok(out)
    }

    /// Import a job bundle produced by [`Runtime::export_job`], possibly in
    /// a different runtime over the same base weights.
    pub fn import_job(&mut self, bytes: &[u8]) -> Result<String, RuntimeError> {
        if bytes.len() < 12 || &bytes[..8] != JOB_BUNDLE_MAGIC {
            return Err(RuntimeError::BadJobBundle("bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + len {
            return Err(RuntimeError::BadJobBundle("truncated header".into()));
        }
        let export: JobExport = serde_json::from_slice(&bytes[12..12 + len])
            .map_err(|e| RuntimeError::BadJobBundle(e.to_string()))?;
        if self.jobs.iter().any(|j| j.cfg.job_id == export.cfg.job_id) {
            return Err(RuntimeError::DuplicateTrainJob(export.cfg.job_id));
        }
        let adapter_id = self.vm.unvoid(&bytes[12 + len..])?;
        if adapter_id != export.cfg.adapter_id {
            // Roll back so a bad bundle leaves the runtime unchanged.
            let _ = self.vm.detach(&adapter_id);
            return Err(RuntimeError::BadJobBundle(format!(
                "bundle adapter {:?} does not match job adapter {:?}",
                adapter_id, export.cfg.adapter_id
            )));
        }
        if self
            .vm
            .instance(&adapter_id)
            .is_some_and(|inst| inst.trainer.is_none())
        {
            let _ = self.vm.detach(&adapter_id);
            return Err(RuntimeError::BadJobBundle(
                "bundle carries no trainer state".into(),
            ));
        }
        let job_id = export.cfg.job_id.clone();
        self.jobs.push(TrainJob {
            cfg: export.cfg,
            paused: export.paused,
        });
        Ok(job_id)
    }

    fn alloc_cache(&mut self) -> usize {
        let cfg = self.vm.config();
        match self.free_cache_slots.pop() {
            Some(slot) => slot,
            None => {
                self.caches
                    .push(KvCache::new(cfg.n_layers, cfg.hidden, cfg.max_seq));
                self.caches.len() - 1
            }
        }
    }

    fn finish_request(&mut self, ri: usize, at_ms: u64) {
        let cfg = *self.vm.config();
        let r = &mut self.requests[ri];
        r.phase = Phase::Done;
        r.finished_ms = Some(at_ms);
        if let Some(slot) = r.cache_slot.take() {
            self.caches[slot] = KvCache::new(cfg.n_layers, cfg.hidden, cfg.max_seq);
            self.free_cache_slots.push(slot);
        }
        // Saturating: a request submitted ahead of its arrival stamp (direct
        // driver use) counts as zero wait.
        let waiting = r
            .first_scheduled_ms
            .expect("finished implies scheduled")
            .saturating_sub(r.sub.arrival_ms);
        let gaps: Vec<u64> = r
            .emit_times
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect();
        let outcome = slo_verdict(&self.slo, waiting, &gaps);
        r.outcome = Some(outcome);
        self.ledger.record_finished(at_ms, outcome.attained);
    }

    /// Run one scheduler step and advance the virtual clock by `step_ms`.
    pub fn step(&mut self) -> Result<StepReport, RuntimeError> {
        let now = self.clock_ms;
        let t_end = now + self.sched.step_ms;
        let mut report = StepReport {
            step_index: self.step_index,
            started_ms: now,
            ..StepReport::default()
        };

        // Split the budget over the queue state.
        let pending_decodes = self.decoding.len();
        let pending_prefill_rows: usize = self
            .queue
            .iter()
            .map(|&i| self.requests[i].sub.prompt.len())
            .sum();
        let ft_due = self.step_index % self.sched.ft_interleave == 0
            && (0..self.jobs.len()).any(|ji| self.job_active(ji));
        let plan = allocate_capacity(
            self.sched.row_budget,
            pending_decodes,
            pending_prefill_rows,
            ft_due,
        );

        // Pick decode rows round-robin.
        let decode_picks: Vec<usize> = (0..plan.decode_slots)
            .map(|_| self.decoding.pop_front().expect("planned decode exists"))
            .collect();

        // Admit queued prefill/eval requests oldest-first while their rows
        // fit what is left after decodes; stop at the first that does not.
        let prefill_allowance = self.sched.row_budget - plan.decode_slots;
        let mut prefill_picks: Vec<usize> = Vec::new();
        let mut prefill_rows_used = 0usize;
        while let Some(&ri) = self.queue.front() {
            let need = self.requests[ri].sub.prompt.len();
            if prefill_rows_used + need > prefill_allowance {
                break;
            }
            prefill_rows_used += need;
            prefill_picks.push(ri);
            self.queue.pop_front();
        }

        // Fine-tune micro-batches: round-robin over active jobs, one micro
        // per job per step, while whole micro-batches fit the remainder.
        let mut ft_picks: Vec<usize> = Vec::new();
        if plan.finetune_rows > 0 {
            let n = self.jobs.len();
            let mut rows_left = plan.finetune_rows;
            for k in 0..n {
                let ji = (self.ft_cursor + k) % n;
                if !self.job_active(ji) {
                    continue;
                }
                let need = self.jobs[ji].cfg.seq_len;
                if need <= rows_left {
                    rows_left -= need;
                    ft_picks.push(ji);
                }
            }
            if n > 0 {
                self.ft_cursor = (self.ft_cursor + 1) % n;
            }
        }

        if decode_picks.is_empty() && prefill_picks.is_empty() && ft_picks.is_empty() {
            self.step_index += 1;
            self.clock_ms = t_end;
            self.ledger.observe(t_end);
            return Ok(report);
        }

        // Build batch specs. Tags index into `items`.
        let vocab = self.vm.config().vocab_size;
        let mut items: Vec<Item> = Vec::new();
        let mut specs: Vec<JobSpec> = Vec::new();
        let mut slot_ids: Vec<String> = Vec::new();
        let slot_for = |id: &Option<String>, slot_ids: &mut Vec<String>| -> Option<usize> {
            id.as_ref().map(|a| {
                match slot_ids.iter().position(|s| s == a) {
                    Some(i) => i,
                    None => {
                        slot_ids.push(a.clone());
                        slot_ids.len() - 1
                    }
                }
            })
        };

        // Fine-tune micros first so their batch order matches `ft_picks`.
        let mut ft_slots: Vec<usize> = Vec::with_capacity(ft_picks.len());
        let mut ft_weights: Vec<f64> = Vec::with_capacity(ft_picks.len());
        for &ji in &ft_picks {
            let cfgj = self.jobs[ji].cfg.clone();
            let cursor = self.trainer_of(ji).data_cursor;
            let weight = self.trainer_of(ji).micro_weight();
            let tokens = micro_batch_tokens(cfgj.data_seed, cursor, cfgj.seq_len, vocab);
            let slot = slot_for(&Some(cfgj.adapter_id.clone()), &mut slot_ids).unwrap();
            let tag = items.len() as u64;
            items.push(Item::Micro(ji));
            specs.push(JobSpec::finetune(tag, tokens, slot));
            ft_slots.push(slot);
            ft_weights.push(weight);
            report.finetune_rows += cfgj.seq_len;
        }

        for &ri in &prefill_picks {
            self.requests[ri].first_scheduled_ms = Some(now);
            let sub = self.requests[ri].sub.clone();
            let slot = slot_for(&sub.adapter_id, &mut slot_ids);
            let scale = sub.dynamic_scale.unwrap_or(1.0);
            let tag = items.len() as u64;
            match sub.kind {
                RequestKind::Generate => {
                    let cache = self.alloc_cache();
                    self.requests[ri].cache_slot = Some(cache);
                    items.push(Item::Prefill(ri));
                    specs.push(
                        JobSpec::prefill(tag, sub.prompt.clone(), slot, cache).with_scale(scale),
                    );
                    report.prefill_rows += sub.prompt.len();
                }
                RequestKind::Evaluate => {
                    let mut spec = JobSpec::eval(tag, sub.prompt.clone(), slot).with_scale(scale);
                    if let Some(tail) = sub.label_tail {
                        let mut labels = sub.prompt.clone();
                        let cut = labels.len() - tail;
                        for l in labels.iter_mut().take(cut) {
                            *l = IGNORE_ID;
                        }
                        spec = spec.with_labels(labels);
                    }
                    items.push(Item::Eval(ri));
                    specs.push(spec);
                    report.eval_rows += sub.prompt.len();
                }
            }
        }

        for &ri in &decode_picks {
            let sub = &self.requests[ri].sub;
            let slot = slot_for(&sub.adapter_id, &mut slot_ids);
            let scale = sub.dynamic_scale.unwrap_or(1.0);
            let last = *self.requests[ri]
                .generated
                .last()
                .expect("decoding request has a token");
            let cache = self.requests[ri].cache_slot.expect("decoding request has a cache");
            let tag = items.len() as u64;
            items.push(Item::Decode(ri));
            specs.push(JobSpec::decode(tag, last, slot, cache).with_scale(scale));
            report.decode_rows += 1;
        }

        let batch = assemble_batch(specs)?;
        let want_trace = !ft_picks.is_empty();

        // One shared forward (and, with fine-tune rows, one shared backward).
        let losses;
        let logits;
        let mut pending_grads: Vec<(usize, crate::lora::AdapterGradSet<S>)> = Vec::new();
        {
            let (base, rope, handles) = self.vm.step_handles(&slot_ids);
            let mut adapters: Vec<&LoraAdapter<S>> = Vec::with_capacity(handles.len());
            let mut trainers: Vec<Option<&mut Trainer<S>>> = Vec::with_capacity(handles.len());
            for (a, t) in handles {
                adapters.push(a);
                trainers.push(t);
            }
            let mut ft_trainers: Vec<&mut Trainer<S>> = ft_slots
                .iter()
                .map(|&s| trainers[s].take().expect("fine-tune slot has a trainer"))
                .collect();
            let ft_rngs: Vec<&mut SeededRng> =
                ft_trainers.iter_mut().map(|t| &mut t.rng).collect();

            let out = flow_forward(
                base,
                rope,
                &adapters,
                &batch,
                &mut self.caches,
                ft_rngs,
                want_trace,
            )?;
            losses = compute_losses(&batch, &out.logits)?;

            if want_trace {
                let (_f_losses, d_logits) =
                    finetune_loss_backward(&batch, &out.logits, &ft_weights)?;
                let trace = out.trace.as_ref().expect("trace requested");
                let grad_mask: Vec<bool> = (0..adapters.len())
                    .map(|s| ft_slots.contains(&s))
                    .collect();
                let mut grads =
                    flow_backward(base, rope, &adapters, &batch, trace, &d_logits, &grad_mask)?;
                for (k, &ji) in ft_picks.iter().enumerate() {
                    let g = grads[ft_slots[k]]
                        .take()
                        .expect("masked slot produced gradients");
                    pending_grads.push((ji, g));
                }
            }
            logits = out.logits;
        }

        // Trainer updates after the model borrows are gone.
        for (ji, g) in pending_grads {
            let adapter_id = self.jobs[ji].cfg.adapter_id.clone();
            let inst = self
                .vm
                .instance_mut(&adapter_id)
                .expect("job adapter attached");
            let AdapterInstance { adapter, trainer } = inst;
            let trainer = trainer.as_mut().expect("training instance");
            if trainer.absorb_micro(&g) {
                trainer.apply_update(adapter);
                report.optimizer_steps += 1;
                self.optimizer_steps_total += 1;
            }
        }

        // De-interleave results back onto their owners.
        let loss_of = |tag: u64| -> Option<f64> {
            losses
                .iter()
                .find(|l| batch.jobs()[l.job_index].spec.tag == tag)
                .map(|l| l.loss.to_f64())
        };
        let mut new_decoders: Vec<usize> = Vec::new();
        for placed in batch.jobs() {
            let tag = placed.spec.tag;
            match items[tag as usize] {
                Item::Micro(ji) => {
                    let job_id = self.jobs[ji].cfg.job_id.clone();
                    report
                        .losses
                        .push((job_id, loss_of(tag).expect("micro loss computed")));
                    self.ledger
                        .record_finetune_tokens(t_end, self.jobs[ji].cfg.seq_len as u64);
                }
                Item::Eval(ri) => {
                    let loss = loss_of(tag).expect("eval loss computed");
                    self.requests[ri].eval_loss = Some(loss);
                    report.losses.push((self.requests[ri].sub.id.clone(), loss));
                    self.ledger
                        .record_eval_tokens(t_end, placed.row_count as u64);
                    self.finish_request(ri, t_end);
                    report.finished_requests += 1;
                }
                Item::Prefill(ri) => {
                    let row = placed.row_start + placed.row_count - 1;
                    let token = next_token(&logits, row);
                    self.requests[ri].generated.push(token);
                    self.requests[ri].emit_times.push(t_end);
                    self.ledger.record_decode_tokens(t_end, 1);
                    if self.requests[ri].generated.len() >= self.requests[ri].sub.max_new_tokens {
                        self.finish_request(ri, t_end);
                        report.finished_requests += 1;
                    } else {
                        self.requests[ri].phase = Phase::Decoding;
                        new_decoders.push(ri);
                    }
                }
                Item::Decode(ri) => {
                    let token = next_token(&logits, placed.row_start);
                    self.requests[ri].generated.push(token);
                    self.requests[ri].emit_times.push(t_end);
                    self.ledger.record_decode_tokens(t_end, 1);
                    if self.requests[ri].generated.len() >= self.requests[ri].sub.max_new_tokens {
                        self.finish_request(ri, t_end);
                        report.finished_requests += 1;
                    }
                }
            }
        }

        // Survivors keep their round-robin order; fresh decoders join after.
        for &ri in &decode_picks {
            if self.requests[ri].phase != Phase::Done {
                self.decoding.push_back(ri);
            }
        }
        self.decoding.extend(new_decoders);

        self.step_index += 1;
        self.clock_ms = t_end;
        self.ledger.observe(t_end);
        Ok(report)
    }
}

fn next_token<S: Scalar>(logits: &Matrix<S>, row: usize) -> TokenId {
    greedy_pick(logits, row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::ModelView;
    use crate::model::{BaseWeights, ModelConfig};

    fn tiny_runtime(budget: usize, interleave: u64) -> Runtime<f64> {
        let cfg = ModelConfig::test_tiny(8, 1);
        let base = BaseWeights::init_seeded(cfg, 11).unwrap();
        Runtime::new(
            VirtualModel::new(base),
            SchedulerConfig {
                row_budget: budget,
                ft_interleave: interleave,
                step_ms: 100,
                bucket_ms: 1_000,
            },
            SloPolicy::default(),
        )
        .unwrap()
    }

    fn gen_request(id: &str, arrival: u64, prompt: Vec<TokenId>, max_new: usize) -> InferenceSubmission {
        InferenceSubmission {
            id: id.to_string(),
            arrival_ms: arrival,
            kind: RequestKind::Generate,
            adapter_id: None,
            prompt,
            max_new_tokens: max_new,
            label_tail: None,
            dynamic_scale: None,
        }
    }

    fn job_spec(job: &str, adapter: &str, steps: Option<u64>, seq_len: usize) -> TrainJobSpec {
        TrainJobSpec {
            job_id: job.to_string(),
            adapter_id: adapter.to_string(),
            total_steps: steps,
            seq_len,
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
            targets: vec![TargetLinear::Q, TargetLinear::V],
            hyper: TrainHyper {
                accum_steps: 2,
                ..TrainHyper::default()
            },
            seed: 5,
        }
    }

    #[test]
    fn capacity_gives_everything_to_finetune_when_idle() {
        let plan = allocate_capacity(64, 0, 0, true);
        assert_eq!(plan.decode_slots, 0);
        assert_eq!(plan.prefill_rows, 0);
        assert_eq!(plan.finetune_rows, 64);
    }

    #[test]
    fn capacity_full_decode_pressure_starves_finetune() {
        let plan = allocate_capacity(8, 9, 5, true);
        assert_eq!(plan.decode_slots, 8);
        assert_eq!(plan.prefill_rows, 0);
        assert_eq!(plan.finetune_rows, 0);
    }

    #[test]
    fn capacity_is_conserved_and_monotone() {
        let budget = 32;
        for pd in 0..40 {
            for pp in 0..40 {
                let plan = allocate_capacity(budget, pd, pp, true);
                assert!(plan.decode_slots + plan.prefill_rows + plan.finetune_rows <= budget);
                let more_decode = allocate_capacity(budget, pd + 1, pp, true);
                let more_prefill = allocate_capacity(budget, pd, pp + 1, true);
                assert!(more_decode.finetune_rows <= plan.finetune_rows);
                assert!(more_prefill.finetune_rows <= plan.finetune_rows);
            }
        }
    }

    #[test]
    fn capacity_interleave_gate_zeroes_finetune() {
        let plan = allocate_capacity(16, 2, 3, false);
        assert_eq!(plan.finetune_rows, 0);
        assert_eq!(plan.decode_slots, 2);
    }

    #[test]
    fn verdict_checks_waiting_first() {
        let policy = SloPolicy::default();
        let v = slo_verdict(&policy, 6_001, &[2_000]);
        assert!(!v.attained);
        assert_eq!(v.violation, Some(SloViolation::Waiting));
        assert_eq!(v.violation.unwrap().name(), "waiting");
    }

    #[test]
    fn verdict_boundaries_are_inclusive() {
        let policy = SloPolicy::default();
        assert!(slo_verdict(&policy, 6_000, &[]).attained);
        // Mean exactly 200 passes, max exactly 1000 passes.
        assert!(slo_verdict(&policy, 0, &[300, 100]).attained);
        assert!(slo_verdict(&policy, 0, &[1_000, 100, 100, 100, 100, 100]).violation
            == Some(SloViolation::MeanDecode));
        // Mean stays under 200 here so only the max clause trips.
        let gaps = [1_001, 100, 100, 100, 100, 100, 100, 100, 100, 100];
        assert!(slo_verdict(&policy, 0, &gaps).violation == Some(SloViolation::MaxDecode));
    }

    #[test]
    fn verdict_no_gaps_means_zero_latency() {
        let v = slo_verdict(&SloPolicy::default(), 10, &[]);
        assert!(v.attained);
        assert_eq!(v.mean_decode_ms, 0.0);
        assert_eq!(v.max_decode_ms, 0);
    }

    #[test]
    fn empty_step_advances_clock_only() {
        let mut rt = tiny_runtime(8, 1);
        let rep = rt.step().unwrap();
        assert_eq!(rep.total_rows(), 0);
        assert_eq!(rt.now_ms(), 100);
        assert_eq!(rt.step_index(), 1);
    }

    #[test]
    fn generate_request_matches_solo_greedy_path() {
        let mut rt = tiny_runtime(8, 1);
        let prompt = vec![3, 9, 14];
        rt.submit_inference(gen_request("r0", 0, prompt.clone(), 4))
            .unwrap();
        let mut steps = 0;
        while rt.has_pending_work() {
            rt.step().unwrap();
            steps += 1;
            assert!(steps < 50, "request should drain");
        }
        let rep = rt.request_report("r0").unwrap();
        assert_eq!(rep.first_scheduled_ms, Some(0));
        // Prefill at step 0, then 3 decode steps.
        assert_eq!(rep.finished_ms, Some(400));
        assert!(rep.outcome.unwrap().attained);

        let view = ModelView::base_only(rt.vm().base());
        let solo = view.generate_greedy(&prompt, 4, rt.vm().rope()).unwrap();
        assert_eq!(rep.generated, solo);
    }

    #[test]
    fn inference_only_traffic_keeps_adapters_and_base_frozen() {
        let mut rt = tiny_runtime(8, 1);
        rt.provision_serving_adapter("srv", 2, 4.0, 0.0, &[TargetLinear::Q], 3)
            .unwrap();
        let adapter_hash = rt.vm().adapter("srv").unwrap().content_hash();
        let base_hash = rt.vm().base_weights_hash();
        for i in 0..3 {
            let mut sub = gen_request(
                &format!("r{i}"),
                0,
                vec![1 + i as TokenId, 2, 3],
                3,
            );
            sub.adapter_id = Some("srv".into());
            rt.submit_inference(sub).unwrap();
        }
        while rt.has_pending_work() {
            rt.step().unwrap();
        }
        assert_eq!(rt.vm().adapter("srv").unwrap().content_hash(), adapter_hash);
        assert_eq!(rt.vm().base().content_hash(), base_hash);
        let totals = rt.ledger().totals();
        assert_eq!(totals.finetune_tokens, 0);
        assert!(totals.decode_tokens > 0);
    }

    #[test]
    fn decode_pressure_pauses_finetune_then_recovers() {
        let mut rt = tiny_runtime(4, 1);
        rt.register_train_job(job_spec("job", "ada", None, 4)).unwrap();
        for i in 0..4 {
            rt.submit_inference(gen_request(&format!("r{i}"), 0, vec![5], 6))
                .unwrap();
        }
        // Step 0 admits the four single-row prefills; fine-tune is starved.
        let rep0 = rt.step().unwrap();
        assert_eq!(rep0.prefill_rows, 4);
        assert_eq!(rep0.finetune_rows, 0);
        // While all four decode, the budget stays fully conceded.
        let rep1 = rt.step().unwrap();
        assert_eq!(rep1.decode_rows, 4);
        assert_eq!(rep1.finetune_rows, 0);
        while rt.has_pending_work() {
            rt.step().unwrap();
        }
        // Queue drained: the job gets the whole budget again.
        let rep = rt.step().unwrap();
        assert_eq!(rep.finetune_rows, 4);
        assert_eq!(rep.decode_rows, 0);
    }

    #[test]
    fn bounded_job_finishes_and_stops_scheduling() {
        let mut rt = tiny_runtime(8, 1);
        // accum 2, so 3 optimizer steps need 6 micro-steps.
        rt.register_train_job(job_spec("job", "ada", Some(3), 4))
            .unwrap();
        let before = rt.vm().adapter("ada").unwrap().content_hash();
        let mut ft_steps = 0;
        for _ in 0..10 {
            let rep = rt.step().unwrap();
            if rep.finetune_rows > 0 {
                ft_steps += 1;
            }
        }
        assert_eq!(ft_steps, 6);
        assert_eq!(rt.job_optimizer_steps("job").unwrap(), 3);
        assert_eq!(rt.train_status("job").unwrap(), TrainStatus::Finished);
        assert_ne!(rt.vm().adapter("ada").unwrap().content_hash(), before);
        assert_eq!(rt.optimizer_steps_total(), 3);
    }

    #[test]
    fn paused_steps_do_not_perturb_training() {
        let run = |pause: bool| -> (u64, u64) {
            let mut rt = tiny_runtime(8, 1);
            rt.register_train_job(job_spec("job", "ada", Some(4), 4))
                .unwrap();
            rt.step().unwrap();
            rt.step().unwrap();
            if pause {
                rt.pause_job("job").unwrap();
                for _ in 0..3 {
                    let rep = rt.step().unwrap();
                    assert_eq!(rep.finetune_rows, 0);
                }
                assert_eq!(rt.train_status("job").unwrap(), TrainStatus::Paused);
                rt.resume_job("job").unwrap();
            }
            while rt.has_pending_work() {
                rt.step().unwrap();
            }
            let adapter = rt.vm().adapter("ada").unwrap().content_hash();
            let trainer = rt
                .vm()
                .instance("ada")
                .unwrap()
                .trainer
                .as_ref()
                .unwrap()
                .state_hash();
            (adapter, trainer)
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn exported_job_resumes_bit_exactly_in_fresh_runtime() {
        let straight = {
            let mut rt = tiny_runtime(8, 1);
            rt.register_train_job(job_spec("job", "ada", Some(5), 4))
                .unwrap();
            while rt.has_pending_work() {
                rt.step().unwrap();
            }
            (
                rt.vm().adapter("ada").unwrap().content_hash(),
                rt.vm()
                    .instance("ada")
                    .unwrap()
                    .trainer
                    .as_ref()
                    .unwrap()
                    .state_hash(),
            )
        };
        let mut a = tiny_runtime(8, 1);
        a.register_train_job(job_spec("job", "ada", Some(5), 4))
            .unwrap();
        // 5 steps of accum 2 leave a half-filled window; export there.
        for _ in 0..5 {
            a.step().unwrap();
        }
        let bytes = a.export_job("job").unwrap();
        assert_eq!(a.train_job_ids().len(), 0);
        assert!(a.vm().instance("ada").is_none());

        let mut b = tiny_runtime(8, 1);
        let job_id = b.import_job(&bytes).unwrap();
        assert_eq!(job_id, "job");
        while b.has_pending_work() {
            b.step().unwrap();
        }
        let resumed = (
            b.vm().adapter("ada").unwrap().content_hash(),
            b.vm()
                .instance("ada")
                .unwrap()
                .trainer
                .as_ref()
                .unwrap()
                .state_hash(),
        );
        assert_eq!(resumed, straight);
    }

    #[test]
    fn ledger_decode_tokens_match_request_tokens() {
        let mut rt = tiny_runtime(8, 1);
        rt.submit_inference(gen_request("a", 0, vec![1, 2], 3)).unwrap();
        rt.submit_inference(gen_request("b", 50, vec![7], 5)).unwrap();
        while rt.has_pending_work() {
            rt.step().unwrap();
        }
        let emitted: u64 = rt
            .request_reports()
            .iter()
            .map(|r| r.generated.len() as u64)
            .sum();
        assert_eq!(emitted, 8);
        assert_eq!(rt.ledger().totals().decode_tokens, emitted);
        assert_eq!(rt.ledger().totals().arrivals, 2);
        assert_eq!(rt.ledger().totals().finished, 2);
    }

    #[test]
    fn admission_guards_reject_bad_requests() {
        let mut rt = tiny_runtime(8, 1);
        let err = rt.submit_inference(InferenceSubmission {
            adapter_id: Some("ghost".into()),
            ..gen_request("x", 0, vec![1], 1)
        });
        assert!(matches!(err, Err(RuntimeError::UnknownAdapter(_))));
        rt.submit_inference(gen_request("dup", 0, vec![1], 1)).unwrap();
        assert!(matches!(
            rt.submit_inference(gen_request("dup", 0, vec![2], 1)),
            Err(RuntimeError::DuplicateRequest(_))
        ));
        assert!(matches!(
            rt.submit_inference(gen_request("empty", 0, vec![], 1)),
            Err(RuntimeError::EmptyPrompt(_))
        ));
        assert!(matches!(
            rt.submit_inference(gen_request("big", 0, vec![1], 10_000)),
            Err(RuntimeError::SequenceBudget { .. })
        ));
        assert!(matches!(
            rt.submit_inference(gen_request("tok", 0, vec![9_999], 1)),
            Err(RuntimeError::TokenOutOfRange { .. })
        ));
        let eval = InferenceSubmission {
            kind: RequestKind::Evaluate,
            ..gen_request("ev", 0, vec![1], 0)
        };
        assert!(matches!(
            rt.submit_inference(eval),
            Err(RuntimeError::PromptTooShort { .. })
        ));
    }

    #[test]
    fn evaluation_retires_after_one_pass_with_a_loss() {
        let mut rt = tiny_runtime(8, 1);
        let sub = InferenceSubmission {
            kind: RequestKind::Evaluate,
            label_tail: Some(2),
            ..gen_request("ev", 0, vec![4, 8, 15, 16], 0)
        };
        rt.submit_inference(sub).unwrap();
        let rep = rt.step().unwrap();
        assert_eq!(rep.eval_rows, 4);
        assert_eq!(rep.finished_requests, 1);
        let r = rt.request_report("ev").unwrap();
        assert!(r.eval_loss.unwrap().is_finite());
        assert_eq!(r.finished_ms, Some(100));
        assert!(r.outcome.unwrap().attained);
        assert_eq!(rt.ledger().totals().eval_tokens, 4);
        // No cache slot survives an eval pass.
        assert!(rt.free_cache_slots.is_empty() && rt.caches.is_empty());
    }

    #[test]
    fn export_rejects_while_requests_are_live() {
        let mut rt = tiny_runtime(8, 4);
        rt.register_train_job(job_spec("job", "ada", None, 4)).unwrap();
        let mut sub = gen_request("r", 0, vec![1, 2], 4);
        sub.adapter_id = Some("ada".into());
        rt.submit_inference(sub).unwrap();
        assert!(matches!(
            rt.export_job("job"),
            Err(RuntimeError::AdapterBusy { .. })
        ));
        while rt.has_pending_work() {
            rt.step().unwrap();
        }
        assert!(rt.export_job("job").is_ok());
    }

    #[test]
    fn void_adapter_guards_job_ownership() {
        let mut rt = tiny_runtime(8, 1);
        rt.register_train_job(job_spec("job", "ada", None, 4)).unwrap();
        assert!(matches!(
            rt.void_adapter("ada"),
            Err(RuntimeError::JobOwnsAdapter(_))
        ));
        rt.provision_serving_adapter("srv", 2, 4.0, 0.0, &[TargetLinear::Q], 3)
            .unwrap();
        let bytes = rt.void_adapter("srv").unwrap();
        assert!(rt.vm().instance("srv").is_none());
        assert_eq!(rt.unvoid_adapter(&bytes).unwrap(), "srv");
    }

    #[test]
    fn interleave_gates_finetune_steps() {
        let mut rt = tiny_runtime(8, 4);
        rt.register_train_job(job_spec("job", "ada", None, 4)).unwrap();
        let mut pattern = Vec::new();
        for _ in 0..8 {
            let rep = rt.step().unwrap();
            pattern.push(rep.finetune_rows > 0);
        }
        assert_eq!(
            pattern,
            vec![true, false, false, false, true, false, false, false]
        );
    }
}

//! Per-adapter trainer: gradient accumulation plus an AdamW or plain SGD
//! update over the adapter's low-rank pairs.
//!
//! A trainer advances in micro-steps. Each micro-step absorbs the gradient
//! of `loss / accum_steps` for one micro-batch; after `accum_steps` of them
//! the buffered sum (the mean of per-micro-batch gradients) is applied as
//! one optimizer step. All trainer state, including a half-filled
//! accumulation buffer, the optimizer moments, the dataset cursor, and the
//! dropout RNG cursor, snapshots to raw bytes and restores bit-exactly.

use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::lora::{AdapterGradSet, LoraAdapter, LoraError, TargetLinear};
use crate::rng::{RngCursor, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub accum_steps: u32,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            optimizer: OptimizerKind::AdamW,
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            accum_steps: 4,
        }
    }
}

impl TrainHyper {
    pub fn sgd(lr: f64) -> Self {
        TrainHyper {
            optimizer: OptimizerKind::Sgd,
            lr,
            accum_steps: 1,
            ..Default::default()
        }
    }
}

/// Deterministic micro-batch: `seq_len` tokens drawn uniformly from the
/// vocabulary by a stream derived from `(data_seed, cursor)`. The same
/// cursor always yields the same tokens, which is what makes paused and
/// migrated training jobs replayable.
pub fn micro_batch_tokens(
    data_seed: u64,
    cursor: u64,
    seq_len: usize,
    vocab_size: usize,
) -> Vec<TokenId> {
    let mut rng = SeededRng::derive(data_seed, &format!("micro.{cursor}"));
    (0..seq_len)
        .map(|_| rng.next_below(vocab_size as u64) as TokenId)
        .collect()
}

/// Mutable training state for one adapter.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub hyper: TrainHyper,
    /// Applied optimizer steps (drives bias correction).
    step: u64,
    /// Micro-batches absorbed since the last applied step, `0..accum_steps`.
    micro_step: u32,
    accum: AdapterGradSet<S>,
    m: AdapterGradSet<S>,
    v: AdapterGradSet<S>,
    /// Dropout mask stream; owned per job so batch composition cannot
    /// perturb a job's draws.
    pub rng: SeededRng,
    /// Micro-batches consumed from the dataset.
    pub data_cursor: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(adapter: &LoraAdapter<S>, hyper: TrainHyper, dropout_seed: u64) -> Self {
        assert!(hyper.accum_steps >= 1, "accum_steps must be >= 1");
        Trainer {
            hyper,
            step: 0,
            micro_step: 0,
            accum: AdapterGradSet::zeros_like(adapter),
            m: AdapterGradSet::zeros_like(adapter),
            v: AdapterGradSet::zeros_like(adapter),
            rng: SeededRng::new(dropout_seed),
            data_cursor: 0,
        }
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.step
    }

    pub fn micro_step(&self) -> u32 {
        self.micro_step
    }

    /// True between accumulation windows: safe point for pause/void.
    pub fn at_step_boundary(&self) -> bool {
        self.micro_step == 0
    }

    /// Loss weight each micro-batch contributes to the window objective.
    pub fn micro_weight(&self) -> f64 {
        1.0 / self.hyper.accum_steps as f64
    }

    /// Absorb one micro-batch gradient (already weighted by
    /// [`Trainer::micro_weight`]). Returns true when the window is full and
    /// [`Trainer::apply_update`] must run.
    pub fn absorb_micro(&mut self, grads: &AdapterGradSet<S>) -> bool {
        self.accum.add_set(grads);
        self.micro_step += 1;
        self.data_cursor += 1;
        self.micro_step == self.hyper.accum_steps
    }

    /// Apply one optimizer step from the accumulation buffer and clear it.
    pub fn apply_update(&mut self, adapter: &mut LoraAdapter<S>) {
        assert_eq!(
            self.micro_step, self.hyper.accum_steps,
            "apply_update before the accumulation window is full"
        );
        self.step += 1;
        let h = &self.hyper;
        let lr = S::from_f64(h.lr);
        let wd = S::from_f64(h.weight_decay);
        match h.optimizer {
            OptimizerKind::Sgd => {
                for l in 0..adapter.n_layers() {
                    for t in TargetLinear::ALL {
                        let Some(g) = self.accum.pair(l, t) else { continue };
                        let pair = adapter.pair_mut(l, t).expect("grads match adapter layout");
                        sgd_tensor(&mut pair.a, &g.0, lr, wd);
                        sgd_tensor(&mut pair.b, &g.1, lr, wd);
                    }
                }
            }
            OptimizerKind::AdamW => {
                let bc1 = S::from_f64(1.0 - h.beta1.powi(self.step as i32));
                let bc2 = S::from_f64(1.0 - h.beta2.powi(self.step as i32));
                let b1 = S::from_f64(h.beta1);
                let b2 = S::from_f64(h.beta2);
                let eps = S::from_f64(h.eps);
                for l in 0..adapter.n_layers() {
                    for t in TargetLinear::ALL {
                        let Some(g) = self.accum.pair(l, t) else { continue };
                        // Split borrows: grads are read-only here.
                        let (ga, gb) = (g.0.clone(), g.1.clone());
                        let mm = self.m.pair_mut(l, t).expect("moment layout");
                        let (ma, mb) = (&mut mm.0, &mut mm.1);
                        adam_moment(ma, &ga, b1);
                        adam_moment(mb, &gb, b1);
                        let vv = self.v.pair_mut(l, t).expect("moment layout");
                        adam_moment_sq(&mut vv.0, &ga, b2);
                        adam_moment_sq(&mut vv.1, &gb, b2);
                        let pair = adapter.pair_mut(l, t).expect("grads match adapter layout");
                        let mm = self.m.pair(l, t).unwrap();
                        let vv = self.v.pair(l, t).unwrap();
                        adam_apply(&mut pair.a, &mm.0, &vv.0, lr, wd, eps, bc1, bc2);
                        adam_apply(&mut pair.b, &mm.1, &vv.1, lr, wd, eps, bc1, bc2);
                    }
                }
            }
        }
        self.accum = AdapterGradSet::zeros_like(adapter);
        self.micro_step = 0;
    }

    pub(crate) fn meta(&self) -> TrainerMeta {
        TrainerMeta {
            hyper: self.hyper,
            step: self.step,
            micro_step: self.micro_step,
            data_cursor: self.data_cursor,
            rng: self.rng.cursor(),
        }
    }

    pub(crate) fn write_tensors(&self, c: &mut TensorContainer<S>, prefix: &str) {
        for (name, set) in [("accum", &self.accum), ("m", &self.m), ("v", &self.v)] {
            for (l, t, (a, b)) in set.iter_pairs() {
                c.insert(format!("{prefix}{name}.{l}.{}.a", t.name()), a.clone());
                c.insert(format!("{prefix}{name}.{l}.{}.b", t.name()), b.clone());
            }
        }
    }

    pub(crate) fn from_meta_and_tensors(
        meta: TrainerMeta,
        c: &mut TensorContainer<S>,
        prefix: &str,
        adapter: &LoraAdapter<S>,
    ) -> Result<Self, LoraError> {
        let mut sets = Vec::with_capacity(3);
        for name in ["accum", "m", "v"] {
            let mut set = AdapterGradSet::empty(adapter.n_layers());
            for l in 0..adapter.n_layers() {
                for t in TargetLinear::ALL {
                    if adapter.pair(l, t).is_none() {
                        continue;
                    }
                    let a = c
                        .take(&format!("{prefix}{name}.{l}.{}.a", t.name()))
                        .ok_or_else(|| {
                            LoraError::Metadata(format!("missing trainer tensor {name}.{l}"))
                        })?;
                    let b = c
                        .take(&format!("{prefix}{name}.{l}.{}.b", t.name()))
                        .ok_or_else(|| {
                            LoraError::Metadata(format!("missing trainer tensor {name}.{l}"))
                        })?;
                    set.accumulate(l, t, (a, b));
                }
            }
            sets.push(set);
        }
        let v = sets.pop().unwrap();
        let m = sets.pop().unwrap();
        let accum = sets.pop().unwrap();
        Ok(Trainer {
            hyper: meta.hyper,
            step: meta.step,
            micro_step: meta.micro_step,
            data_cursor: meta.data_cursor,
            rng: SeededRng::restore(meta.rng),
            accum,
            m,
            v,
        })
    }

    /// Cheap structural fingerprint for equality assertions in tests.
    pub fn state_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for set in [&self.accum, &self.m, &self.v] {
            for (_, _, (a, b)) in set.iter_pairs() {
                for &x in a.data().iter().chain(b.data().iter()) {
                    x.write_le(&mut bytes);
                }
            }
        }
        bytes.extend_from_slice(&self.step.to_le_bytes());
        bytes.extend_from_slice(&self.micro_step.to_le_bytes());
        bytes.extend_from_slice(&self.data_cursor.to_le_bytes());
        let cur = self.rng.cursor();
        bytes.extend_from_slice(&cur.seed.to_le_bytes());
        bytes.extend_from_slice(&cur.word_pos_hi.to_le_bytes());
        bytes.extend_from_slice(&cur.word_pos_lo.to_le_bytes());
        crate::fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TrainerMeta {
    pub(crate) hyper: TrainHyper,
    pub(crate) step: u64,
    pub(crate) micro_step: u32,
    pub(crate) data_cursor: u64,
    pub(crate) rng: RngCursor,
}

fn sgd_tensor<S: Scalar>(theta: &mut Matrix<S>, g: &Matrix<S>, lr: S, wd: S) {
    for (p, &gv) in theta.data_mut().iter_mut().zip(g.data().iter()) {
        *p -= lr * (gv + wd * *p);
    }
}

fn adam_moment<S: Scalar>(m: &mut Matrix<S>, g: &Matrix<S>, beta: S) {
    for (mv, &gv) in m.data_mut().iter_mut().zip(g.data().iter()) {
        *mv = beta * *mv + (S::ONE - beta) * gv;
    }
}

fn adam_moment_sq<S: Scalar>(v: &mut Matrix<S>, g: &Matrix<S>, beta: S) {
    for (vv, &gv) in v.data_mut().iter_mut().zip(g.data().iter()) {
        *vv = beta * *vv + (S::ONE - beta) * gv * gv;
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_apply<S: Scalar>(
    theta: &mut Matrix<S>,
    m: &Matrix<S>,
    v: &Matrix<S>,
    lr: S,
    wd: S,
    eps: S,
    bc1: S,
    bc2: S,
) {
    for ((p, &mv), &vv) in theta
        .data_mut()
        .iter_mut()
        .zip(m.data().iter())
        .zip(v.data().iter())
    {
        let m_hat = mv / bc1;
        let v_hat = vv / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraPair;
    use crate::testutil::{seeded_matrix, SmallRng64};

    fn small_adapter(seed: u64) -> LoraAdapter<f64> {
        let mut rng = SmallRng64::new(seed);
        let layers = (0..2)
            .map(|_| {
                vec![(
                    TargetLinear::Q,
                    LoraPair {
                        a: seeded_matrix(2, 4, &mut rng),
                        b: seeded_matrix(4, 2, &mut rng),
                    },
                )]
            })
            .collect();
        LoraAdapter::from_pairs("t", 2, 4.0, layers)
    }

    fn grad_like(adapter: &LoraAdapter<f64>, fill: f64) -> AdapterGradSet<f64> {
        let mut g = AdapterGradSet::zeros_like(adapter);
        for l in 0..adapter.n_layers() {
            let (a, b) = g.pair_mut(l, TargetLinear::Q).unwrap();
            for v in a.data_mut().iter_mut().chain(b.data_mut().iter_mut()) {
                *v = fill * (l + 1) as f64;
            }
        }
        g
    }

    #[test]
    fn sgd_step_is_linear_in_lr_and_grad() {
        let mut adapter = small_adapter(1);
        let before = adapter.clone();
        let g = grad_like(&adapter, 0.25);
        let lr = 0.01;
        let mut tr = Trainer::new(&adapter, TrainHyper::sgd(lr), 0);
        assert!(tr.absorb_micro(&g));
        tr.apply_update(&mut adapter);
        for l in 0..2 {
            let p0 = before.pair(l, TargetLinear::Q).unwrap();
            let p1 = adapter.pair(l, TargetLinear::Q).unwrap();
            let gp = g.pair(l, TargetLinear::Q).unwrap();
            for ((x0, x1), gv) in p0
                .a
                .data()
                .iter()
                .zip(p1.a.data())
                .zip(gp.0.data())
            {
                assert!((x1 - (x0 - lr * gv)).abs() < 1e-15);
            }
        }
        assert_eq!(tr.optimizer_steps(), 1);
        assert!(tr.at_step_boundary());
    }

    #[test]
    fn accumulation_equals_mean_of_micro_grads() {
        // One window of 4 quarters-weighted micros == one window of a single
        // full-weight micro with the mean gradient.
        let adapter0 = small_adapter(2);

        let mut a_accum = adapter0.clone();
        let mut tr4 = Trainer::new(
            &a_accum,
            TrainHyper {
                optimizer: OptimizerKind::Sgd,
                lr: 0.1,
                accum_steps: 4,
                ..Default::default()
            },
            0,
        );
        let fills = [0.1, 0.3, -0.2, 0.6];
        for (i, f) in fills.iter().enumerate() {
            // Caller-side weighting by 1/A, as the flow does via loss weights.
            let mut g = grad_like(&a_accum, *f);
            g.scale_assign(tr4.micro_weight());
            let full = tr4.absorb_micro(&g);
            assert_eq!(full, i == 3);
        }
        tr4.apply_update(&mut a_accum);

        let mut a_mean = adapter0.clone();
        let mut tr1 = Trainer::new(&a_mean, TrainHyper::sgd(0.1), 0);
        let mean_fill = fills.iter().sum::<f64>() / 4.0;
        let g = grad_like(&a_mean, mean_fill);
        assert!(tr1.absorb_micro(&g));
        tr1.apply_update(&mut a_mean);

        for l in 0..2 {
            let pa = a_accum.pair(l, TargetLinear::Q).unwrap();
            let pm = a_mean.pair(l, TargetLinear::Q).unwrap();
            assert!(pa.a.max_abs_diff(&pm.a) <= 1e-12);
            assert!(pa.b.max_abs_diff(&pm.b) <= 1e-12);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr_signs() {
        // With zero moments, step 1 gives m_hat/sqrt(v_hat) = sign(g) up to
        // eps, so each parameter moves by about -lr * sign(g).
        let mut adapter = small_adapter(3);
        let before = adapter.clone();
        let g = grad_like(&adapter, 0.5);
        let hyper = TrainHyper {
            accum_steps: 1,
            lr: 1e-3,
            ..Default::default()
        };
        let mut tr = Trainer::new(&adapter, hyper, 0);
        assert!(tr.absorb_micro(&g));
        tr.apply_update(&mut adapter);
        for l in 0..2 {
            let p0 = before.pair(l, TargetLinear::Q).unwrap();
            let p1 = adapter.pair(l, TargetLinear::Q).unwrap();
            for (x0, x1) in p0.a.data().iter().zip(p1.a.data()) {
                let delta = x1 - x0;
                assert!((delta + 1e-3).abs() < 1e-6, "delta {delta}");
            }
        }
    }

    #[test]
    fn adamw_bias_correction_matches_reference_scalar() {
        // Independent scalar AdamW oracle over 3 steps.
        let mut adapter = small_adapter(4);
        let hyper = TrainHyper {
            accum_steps: 1,
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut tr = Trainer::new(&adapter, hyper, 0);
        let grads = [0.4, -0.7, 0.2];
        let theta0 = adapter.pair(0, TargetLinear::Q).unwrap().a.get(0, 0);

        let (mut theta, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
        for (i, gfix) in grads.iter().enumerate() {
            let g = grad_like(&adapter, *gfix);
            let g00 = g.pair(0, TargetLinear::Q).unwrap().0.get(0, 0);
            assert!(tr.absorb_micro(&g));
            tr.apply_update(&mut adapter);

            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g00;
            v = 0.999 * v + 0.001 * g00 * g00;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.01 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.1 * theta);
            let got = adapter.pair(0, TargetLinear::Q).unwrap().a.get(0, 0);
            assert!((got - theta).abs() <= 1e-15, "step {t}: {got} vs {theta}");
        }
    }

    #[test]
    fn snapshot_roundtrip_is_bit_exact_mid_window() {
        let adapter = small_adapter(5);
        let mut tr = Trainer::new(&adapter, TrainHyper::default(), 42);
        // Push the rng and fill part of a window.
        for _ in 0..7 {
            tr.rng.next_uniform();
        }
        let g = grad_like(&adapter, 0.33);
        assert!(!tr.absorb_micro(&g));
        assert!(!tr.at_step_boundary());

        let mut c = TensorContainer::<f64>::with_metadata(
            serde_json::to_string(&tr.meta()).unwrap(),
        );
        tr.write_tensors(&mut c, "trainer.");
        let bytes = c.to_bytes();

        let mut back = TensorContainer::<f64>::from_bytes(&bytes).unwrap();
        let meta: TrainerMeta = serde_json::from_str(back.metadata()).unwrap();
        let restored =
            Trainer::from_meta_and_tensors(meta, &mut back, "trainer.", &adapter).unwrap();
        assert_eq!(restored.state_hash(), tr.state_hash());
        assert_eq!(restored.micro_step(), 1);
        assert_eq!(restored.data_cursor, 1);
        // The restored rng continues the stream, not restarts it.
        let mut orig_rng = tr.rng.clone();
        let mut rest_rng = restored.rng.clone();
        assert_eq!(orig_rng.next_u64(), rest_rng.next_u64());
    }

    #[test]
    fn micro_batches_are_cursor_deterministic() {
        let a = micro_batch_tokens(9, 0, 16, 64);
        let b = micro_batch_tokens(9, 0, 16, 64);
        let c = micro_batch_tokens(9, 1, 16, 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&t| (t as usize) < 64));
    }
}

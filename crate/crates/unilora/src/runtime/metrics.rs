//! Time-bucketed throughput counters and SLO attainment for replayed runs.
//!
//! Counters land in fixed-width buckets keyed by absolute virtual-clock
//! milliseconds. Buckets are materialized lazily but reported densely from
//! time zero, so two runs over the same horizon always produce the same
//! number of rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Raw counters for one bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bucket {
    pub arrivals: u64,
    pub decode_tokens: u64,
    pub finetune_tokens: u64,
    pub eval_tokens: u64,
    pub finished: u64,
    pub attained: u64,
}

/// One dense report row. Rates are per second regardless of bucket width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub bucket_start_ms: u64,
    pub rps: f64,
    pub dtps: f64,
    pub ftps: f64,
    pub etps: f64,
    /// Attained/finished over all buckets up to and including this one;
    /// 1.0 while nothing has finished.
    pub slo_attainment_cum: f64,
}

/// Whole-run totals, the sum of every bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub arrivals: u64,
    pub decode_tokens: u64,
    pub finetune_tokens: u64,
    pub eval_tokens: u64,
    pub finished: u64,
    pub attained: u64,
}

impl Totals {
    pub fn attainment(&self) -> f64 {
        if self.finished == 0 {
            1.0
        } else {
            self.attained as f64 / self.finished as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsLedger {
    bucket_ms: u64,
    buckets: BTreeMap<u64, Bucket>,
    horizon_ms: u64,
}

impl MetricsLedger {
    pub fn new(bucket_ms: u64) -> Self {
        assert!(bucket_ms >= 1, "bucket width must be >= 1 ms");
        MetricsLedger {
            bucket_ms,
            buckets: BTreeMap::new(),
            horizon_ms: 0,
        }
    }

    pub fn bucket_ms(&self) -> u64 {
        self.bucket_ms
    }

    fn bucket_mut(&mut self, at_ms: u64) -> &mut Bucket {
        self.horizon_ms = self.horizon_ms.max(at_ms);
        let key = at_ms / self.bucket_ms;
        self.buckets.entry(key).or_default()
    }

    /// Extend the reporting horizon without recording anything.
    pub fn observe(&mut self, at_ms: u64) {
        self.horizon_ms = self.horizon_ms.max(at_ms);
    }

    pub fn record_arrival(&mut self, at_ms: u64) {
        self.bucket_mut(at_ms).arrivals += 1;
    }

    pub fn record_decode_tokens(&mut self, at_ms: u64, n: u64) {
        self.bucket_mut(at_ms).decode_tokens += n;
    }

    pub fn record_finetune_tokens(&mut self, at_ms: u64, n: u64) {
        self.bucket_mut(at_ms).finetune_tokens += n;
    }

    pub fn record_eval_tokens(&mut self, at_ms: u64, n: u64) {
        self.bucket_mut(at_ms).eval_tokens += n;
    }

    pub fn record_finished(&mut self, at_ms: u64, attained: bool) {
        let b = self.bucket_mut(at_ms);
        b.finished += 1;
        if attained {
            b.attained += 1;
        }
    }

    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        for b in self.buckets.values() {
            t.arrivals += b.arrivals;
            t.decode_tokens += b.decode_tokens;
            t.finetune_tokens += b.finetune_tokens;
            t.eval_tokens += b.eval_tokens;
            t.finished += b.finished;
            t.attained += b.attained;
        }
        t
    }

    /// Dense rows from time zero through the last touched bucket.
    pub fn rows(&self) -> Vec<MetricsRow> {
        let last_from_horizon = if self.horizon_ms == 0 {
            None
        } else {
            Some((self.horizon_ms - 1) / self.bucket_ms)
        };
        let last_from_counts = self.buckets.keys().next_back().copied();
        let last = match (last_from_horizon, last_from_counts) {
            (None, None) => return Vec::new(),
            (a, b) => a.unwrap_or(0).max(b.unwrap_or(0)),
        };
        let per_second = 1000.0 / self.bucket_ms as f64;
        let mut finished = 0u64;
        let mut attained = 0u64;
        let mut rows = Vec::with_capacity(last as usize + 1);
        for key in 0..=last {
            let b = self.buckets.get(&key).copied().unwrap_or_default();
            finished += b.finished;
            attained += b.attained;
            let cum = if finished == 0 {
                1.0
            } else {
                attained as f64 / finished as f64
            };
            rows.push(MetricsRow {
                bucket_start_ms: key * self.bucket_ms,
                rps: b.arrivals as f64 * per_second,
                dtps: b.decode_tokens as f64 * per_second,
                ftps: b.finetune_tokens as f64 * per_second,
                etps: b.eval_tokens as f64 * per_second,
                slo_attainment_cum: cum,
            });
        }
        rows
    }

    /// CSV with a config-hash comment line, then a fixed header, then one
    /// row per bucket. Byte-stable for identical runs.
    pub fn to_csv(&self, config_hash: u64) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_hash={config_hash:016x}");
        out.push_str("bucket_start_ms,rps,dtps,ftps,etps,slo_attainment_cum\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{:.3},{:.3},{:.6}",
                r.bucket_start_ms, r.rps, r.dtps, r.ftps, r.etps, r.slo_attainment_cum
            );
        }
        out
    }
}

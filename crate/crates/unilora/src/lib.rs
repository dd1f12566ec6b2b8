//! Unified LoRA fine-tuning and inference over one shared base model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense kernels with explicit backward counterparts
//! - [`model`]: the toy causal transformer (config, weights, KV cache,
//!   attention cores, cache-free/prefill/decode paths)
//! - [`lora`]: adapters, the segment map over packed batches, and the
//!   segmented multi-adapter matmul with its LoRA backward
//! - [`vm`]: virtual model instances over a shared immutable base, with
//!   serializable migration bundles
//! - [`flow`]: unified batch assembly and the mixed
//!   fine-tune/evaluate/prefill/decode forward and shared backward
//! - [`train`]: per-adapter gradient accumulation and optimizer steps
//! - [`runtime`]: admission, capacity allocation, the step loop, and
//!   SLO/throughput accounting
//! - [`harness`]: workload generation, trace replay on a virtual clock, and
//!   metrics export

pub mod container;
pub mod flow;
pub mod harness;
pub mod lora;
pub mod model;
pub mod rng;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vm;

#[cfg(test)]
pub(crate) mod testutil;

/// FNV-1a over raw bytes; used for config echoes and weight purity checks.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

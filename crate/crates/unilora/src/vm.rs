//! Virtualized adapter instances over one shared, immutable base model.
//!
//! A [`VirtualModel`] owns the base weights once (behind `Arc`) and a
//! registry of adapter instances keyed by id. Instances attach and detach
//! without touching the base. An instance can be *voided*: detached and
//! serialized to a self-contained bundle holding the adapter pairs and, for
//! training instances, the full trainer state (optimizer moments, a possibly
//! half-filled accumulation buffer, dataset cursor, RNG cursor). Bundles
//! never contain base weights; they record the base config and weight hashes
//! so *unvoiding* onto a host with a different base fails loudly instead of
//! corrupting training.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerError, TensorContainer};
use crate::lora::{AdapterMeta, LoraAdapter, LoraError};
use crate::model::rope::RopeTable;
use crate::model::{BaseWeights, ModelConfig};
use crate::scalar::Scalar;
use crate::train::{Trainer, TrainerMeta};

#[derive(Debug, Error)]
pub enum VmError {
    #[error("adapter {0:?} is already attached")]
    DuplicateAdapter(String),
    #[error("no adapter {0:?} attached")]
    UnknownAdapter(String),
    #[error("adapter {adapter:?} does not fit the base model: {detail}")]
    ShapeMismatch { adapter: String, detail: String },
    #[error("bundle was voided from a different base ({field}: {expected:#018x} != {got:#018x})")]
    BaseMismatch {
        field: &'static str,
        expected: u64,
        got: u64,
    },
    #[error("bundle metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
}

/// One attached adapter plus its optional training state.
#[derive(Debug, Clone)]
pub struct AdapterInstance<S> {
    pub adapter: LoraAdapter<S>,
    pub trainer: Option<Trainer<S>>,
}

impl<S: Scalar> AdapterInstance<S> {
    pub fn serving(adapter: LoraAdapter<S>) -> Self {
        AdapterInstance {
            adapter,
            trainer: None,
        }
    }

    pub fn training(adapter: LoraAdapter<S>, trainer: Trainer<S>) -> Self {
        AdapterInstance {
            adapter,
            trainer: Some(trainer),
        }
    }

    /// Bytes held by this instance: adapter pairs plus trainer buffers
    /// (accumulation and both moment sets mirror the adapter layout).
    pub fn byte_size(&self) -> usize {
        let adapter = self.adapter.byte_size();
        match &self.trainer {
            Some(_) => adapter * 4,
            None => adapter,
        }
    }
}

/// Registry of adapter instances over one shared base.
pub struct VirtualModel<S> {
    base: Arc<BaseWeights<S>>,
    rope: Arc<RopeTable<S>>,
    instances: BTreeMap<String, AdapterInstance<S>>,
    base_config_hash: u64,
    base_weights_hash: u64,
}

impl<S: Scalar> VirtualModel<S> {
    pub fn new(base: BaseWeights<S>) -> Self {
        Self::from_arc(Arc::new(base))
    }

    pub fn from_arc(base: Arc<BaseWeights<S>>) -> Self {
        let cfg = base.config;
        let rope = RopeTable::new(cfg.max_seq, cfg.n_heads, cfg.head_dim, cfg.rope_theta);
        VirtualModel {
            base_config_hash: cfg.content_hash(),
            base_weights_hash: base.content_hash(),
            base,
            rope: Arc::new(rope),
            instances: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    pub fn base(&self) -> &BaseWeights<S> {
        &self.base
    }

    pub fn share_base(&self) -> Arc<BaseWeights<S>> {
        Arc::clone(&self.base)
    }

    pub fn rope(&self) -> &RopeTable<S> {
        &self.rope
    }

    pub fn base_weights_hash(&self) -> u64 {
        self.base_weights_hash
    }

    fn validate_shapes(&self, adapter: &LoraAdapter<S>) -> Result<(), VmError> {
        let cfg = &self.base.config;
        if adapter.n_layers() != cfg.n_layers {
            return Err(VmError::ShapeMismatch {
                adapter: adapter.id().to_string(),
                detail: format!(
                    "adapter spans {} layers, base has {}",
                    adapter.n_layers(),
                    cfg.n_layers
                ),
            });
        }
        for (l, t, pair) in adapter.iter_pairs() {
            let (inf, outf) = t.dims(cfg.hidden, cfg.mlp_hidden);
            let ok = pair.a.rows() == adapter.rank()
                && pair.a.cols() == inf
                && pair.b.rows() == outf
                && pair.b.cols() == adapter.rank();
            if !ok {
                return Err(VmError::ShapeMismatch {
                    adapter: adapter.id().to_string(),
                    detail: format!(
                        "layer {l} {}: a is {}x{}, b is {}x{}, want a {}x{} b {}x{}",
                        t.name(),
                        pair.a.rows(),
                        pair.a.cols(),
                        pair.b.rows(),
                        pair.b.cols(),
                        adapter.rank(),
                        inf,
                        outf,
                        adapter.rank(),
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn attach(&mut self, instance: AdapterInstance<S>) -> Result<(), VmError> {
        let id = instance.adapter.id().to_string();
        if self.instances.contains_key(&id) {
            return Err(VmError::DuplicateAdapter(id));
        }
        self.validate_shapes(&instance.adapter)?;
        self.instances.insert(id, instance);
        Ok(())
    }

    pub fn detach(&mut self, id: &str) -> Result<AdapterInstance<S>, VmError> {
        self.instances
            .remove(id)
            .ok_or_else(|| VmError::UnknownAdapter(id.to_string()))
    }

    pub fn instance(&self, id: &str) -> Option<&AdapterInstance<S>> {
        self.instances.get(id)
    }

    /// Split borrows for one scheduler step: shared base and rope tables
    /// immutably, plus per requested id the adapter immutably and its
    /// trainer mutably. `ids` must be attached and free of duplicates.
    #[allow(clippy::type_complexity)]
    pub fn step_handles(
        &mut self,
        ids: &[String],
    ) -> (
        &BaseWeights<S>,
        &RopeTable<S>,
        Vec<(&LoraAdapter<S>, Option<&mut Trainer<S>>)>,
    ) {
        let VirtualModel {
            base,
            rope,
            instances,
            ..
        } = self;
        let mut picked: BTreeMap<&str, (&LoraAdapter<S>, Option<&mut Trainer<S>>)> =
            BTreeMap::new();
        for (id, inst) in instances.iter_mut() {
            if ids.iter().any(|want| want == id) {
                let AdapterInstance { adapter, trainer } = inst;
                picked.insert(id.as_str(), (&*adapter, trainer.as_mut()));
            }
        }
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let handle = picked
                .remove(id.as_str())
                .unwrap_or_else(|| panic!("adapter `{id}` not attached or listed twice"));
            out.push(handle);
        }
        (base, rope, out)
    }

    pub fn instance_mut(&mut self, id: &str) -> Option<&mut AdapterInstance<S>> {
        self.instances.get_mut(id)
    }

    pub fn adapter(&self, id: &str) -> Option<&LoraAdapter<S>> {
        self.instances.get(id).map(|i| &i.adapter)
    }

    /// Attached ids in sorted order.
    pub fn ids(&self) -> Vec<String> {
        self.instances.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn base_bytes(&self) -> usize {
        self.base.byte_size()
    }

    pub fn adapter_bytes(&self) -> usize {
        self.instances.values().map(|i| i.byte_size()).sum()
    }

    /// Detach an instance and serialize it to a migration bundle.
    pub fn void(&mut self, id: &str) -> Result<Vec<u8>, VmError> {
        let instance = self.detach(id)?;
        let bundle = AdapterBundle {
            instance,
            base_config_hash: self.base_config_hash,
            base_weights_hash: self.base_weights_hash,
        };
        Ok(bundle.to_bytes())
    }

    /// Import a bundle voided from a host with byte-identical base weights.
    /// Returns the adapter id.
    pub fn unvoid(&mut self, bytes: &[u8]) -> Result<String, VmError> {
        let bundle = AdapterBundle::from_bytes(bytes)?;
        if bundle.base_config_hash != self.base_config_hash {
            return Err(VmError::BaseMismatch {
                field: "config",
                expected: bundle.base_config_hash,
                got: self.base_config_hash,
            });
        }
        if bundle.base_weights_hash != self.base_weights_hash {
            return Err(VmError::BaseMismatch {
                field: "weights",
                expected: bundle.base_weights_hash,
                got: self.base_weights_hash,
            });
        }
        let id = bundle.instance.adapter.id().to_string();
        self.attach(bundle.instance)?;
        Ok(id)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    format: u32,
    base_config_hash: u64,
    base_weights_hash: u64,
    adapter: AdapterMeta,
    trainer: Option<TrainerMeta>,
}

const BUNDLE_FORMAT: u32 = 1;

/// A voided instance: everything needed to continue serving or training on
/// another host with the same base, and nothing else.
pub struct AdapterBundle<S> {
    pub instance: AdapterInstance<S>,
    pub base_config_hash: u64,
    pub base_weights_hash: u64,
}

impl<S: Scalar> AdapterBundle<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = BundleMeta {
            format: BUNDLE_FORMAT,
            base_config_hash: self.base_config_hash,
            base_weights_hash: self.base_weights_hash,
            adapter: self.instance.adapter.meta(),
            trainer: self.instance.trainer.as_ref().map(|t| t.meta()),
        };
        let mut c = TensorContainer::<S>::with_metadata(
            serde_json::to_string(&meta).expect("bundle metadata serializes"),
        );
        self.instance.adapter.write_tensors(&mut c, "adapter.");
        if let Some(trainer) = &self.instance.trainer {
            trainer.write_tensors(&mut c, "trainer.");
        }
        c.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VmError> {
        let mut c = TensorContainer::<S>::from_bytes(bytes)?;
        let meta: BundleMeta = serde_json::from_str(c.metadata())
            .map_err(|e| VmError::Metadata(e.to_string()))?;
        if meta.format != BUNDLE_FORMAT {
            return Err(VmError::Metadata(format!(
                "unsupported bundle format {}",
                meta.format
            )));
        }
        let adapter = LoraAdapter::from_meta_and_tensors(meta.adapter, &mut c, "adapter.")?;
        let trainer = match meta.trainer {
            Some(tm) => Some(Trainer::from_meta_and_tensors(tm, &mut c, "trainer.", &adapter)?),
            None => None,
        };
        Ok(AdapterBundle {
            instance: AdapterInstance { adapter, trainer },
            base_config_hash: meta.base_config_hash,
            base_weights_hash: meta.base_weights_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::TargetLinear;
    use crate::rng::SeededRng;
    use crate::train::TrainHyper;

    fn make_vm(seed: u64) -> VirtualModel<f64> {
        let cfg = ModelConfig::test_tiny(8, 2);
        VirtualModel::new(BaseWeights::init_seeded(cfg, seed).unwrap())
    }

    fn make_adapter(vm: &VirtualModel<f64>, id: &str, seed: u64) -> LoraAdapter<f64> {
        let cfg = vm.config();
        let mut rng = SeededRng::new(seed);
        LoraAdapter::init_finetune(
            id,
            2,
            4.0,
            0.0,
            &TargetLinear::ALL,
            cfg.n_layers,
            cfg.hidden,
            cfg.mlp_hidden,
            &mut rng,
        )
    }

    #[test]
    fn attach_detach_and_registry_errors() {
        let mut vm = make_vm(1);
        let a = make_adapter(&vm, "alpha", 2);
        vm.attach(AdapterInstance::serving(a.clone())).unwrap();
        assert!(matches!(
            vm.attach(AdapterInstance::serving(a)),
            Err(VmError::DuplicateAdapter(_))
        ));
        assert_eq!(vm.ids(), vec!["alpha".to_string()]);
        assert!(vm.detach("alpha").is_ok());
        assert!(matches!(
            vm.detach("alpha"),
            Err(VmError::UnknownAdapter(_))
        ));
        assert!(vm.is_empty());
    }

    #[test]
    fn attach_rejects_wrong_shapes() {
        let mut vm = make_vm(1);
        // Adapter initialized for a wider model.
        let other_cfg = ModelConfig::test_tiny(12, 2);
        let mut rng = SeededRng::new(3);
        let wrong = LoraAdapter::<f64>::init_finetune(
            "wide",
            2,
            4.0,
            0.0,
            &[TargetLinear::Q],
            other_cfg.n_layers,
            other_cfg.hidden,
            other_cfg.mlp_hidden,
            &mut rng,
        );
        assert!(matches!(
            vm.attach(AdapterInstance::serving(wrong)),
            Err(VmError::ShapeMismatch { .. })
        ));
        // Wrong layer count.
        let mut rng = SeededRng::new(4);
        let short = LoraAdapter::<f64>::init_finetune(
            "short",
            2,
            4.0,
            0.0,
            &[TargetLinear::Q],
            1,
            8,
            16,
            &mut rng,
        );
        assert!(matches!(
            vm.attach(AdapterInstance::serving(short)),
            Err(VmError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn void_unvoid_roundtrip_is_bit_exact_including_trainer() {
        let mut vm = make_vm(7);
        let adapter = make_adapter(&vm, "job", 8);
        let mut trainer = Trainer::new(&adapter, TrainHyper::default(), 99);
        for _ in 0..5 {
            trainer.rng.next_gaussian();
        }
        let adapter_hash = adapter.content_hash();
        let trainer_hash = trainer.state_hash();
        vm.attach(AdapterInstance::training(adapter, trainer)).unwrap();

        let bytes = vm.void("job").unwrap();
        assert!(vm.is_empty());

        // Second host, same base weights.
        let mut vm2 = make_vm(7);
        let id = vm2.unvoid(&bytes).unwrap();
        assert_eq!(id, "job");
        let inst = vm2.instance("job").unwrap();
        assert_eq!(inst.adapter.content_hash(), adapter_hash);
        assert_eq!(inst.trainer.as_ref().unwrap().state_hash(), trainer_hash);

        // Voiding again reproduces the identical bundle bytes.
        let bytes2 = vm2.void("job").unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn unvoid_rejects_mismatched_base() {
        let mut vm = make_vm(7);
        let adapter = make_adapter(&vm, "job", 8);
        vm.attach(AdapterInstance::serving(adapter)).unwrap();
        let bytes = vm.void("job").unwrap();

        let mut other = make_vm(8);
        assert!(matches!(
            other.unvoid(&bytes),
            Err(VmError::BaseMismatch { field: "weights", .. })
        ));
    }

    #[test]
    fn bundles_exclude_base_and_ignore_base_growth() {
        // Same adapter shape over two bases that differ only in vocab size:
        // bundle bytes must be identical, because no base tensors ride along.
        let cfg_small = ModelConfig::test_tiny(8, 2);
        let mut cfg_big = cfg_small;
        cfg_big.vocab_size = cfg_small.vocab_size * 4;
        let vm_small = VirtualModel::new(BaseWeights::<f64>::init_seeded(cfg_small, 1).unwrap());
        let vm_big = VirtualModel::new(BaseWeights::<f64>::init_seeded(cfg_big, 2).unwrap());
        assert!(vm_big.base_bytes() > vm_small.base_bytes());

        let bundle_for = |vm: &VirtualModel<f64>| {
            let adapter = make_adapter(vm, "a", 3);
            AdapterBundle {
                instance: AdapterInstance::serving(adapter),
                base_config_hash: 0,
                base_weights_hash: 0,
            }
            .to_bytes()
            .len()
        };
        assert_eq!(bundle_for(&vm_small), bundle_for(&vm_big));
    }

    #[test]
    fn byte_accounting_matches_analytic_counts() {
        let vm = make_vm(1);
        let cfg = vm.config();
        let adapter = make_adapter(&vm, "a", 2);
        // r=2 pairs on all 7 targets: 4 square (h->h), up/gate (h->m), down (m->h).
        let (h, m, r) = (cfg.hidden, cfg.mlp_hidden, 2);
        let per_layer = 4 * (r * h + h * r) + 2 * (r * h + m * r) + (r * m + h * r);
        let expected = per_layer * cfg.n_layers * 8;
        assert_eq!(adapter.byte_size(), expected);

        let trainer = Trainer::new(&adapter, TrainHyper::default(), 0);
        let inst = AdapterInstance::training(adapter, trainer);
        assert_eq!(inst.byte_size(), expected * 4);
    }

    #[test]
    fn many_instances_share_one_base_allocation() {
        let first = make_vm(5);
        let base_bytes = first.base_bytes();
        let shared = first.share_base();

        let mut hosts: Vec<VirtualModel<f64>> = (0..8)
            .map(|_| VirtualModel::from_arc(Arc::clone(&shared)))
            .collect();
        for (i, vm) in hosts.iter_mut().enumerate() {
            assert!(std::ptr::eq(vm.base(), first.base()));
            assert_eq!(vm.base_bytes(), base_bytes);
            let cfg = *vm.config();
            let mut rng = SeededRng::new(i as u64);
            let adapter = LoraAdapter::init_finetune(
                format!("ada-{i}"),
                1,
                2.0,
                0.0,
                &[TargetLinear::Q],
                cfg.n_layers,
                cfg.hidden,
                cfg.mlp_hidden,
                &mut rng,
            );
            vm.attach(AdapterInstance::serving(adapter)).unwrap();
        }

        // Total footprint of 9 hosts: one base plus lean adapters, nowhere
        // near 9 copies of the base.
        let adapter_total: usize = hosts.iter().map(|vm| vm.adapter_bytes()).sum();
        assert!(adapter_total > 0);
        assert!(adapter_total < base_bytes, "adapters out-weigh the base");
    }
}

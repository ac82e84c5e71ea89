//! Checkpoints: parameters, AdamW moments and run metadata in one container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Stage, TrainConfig, TrainablePolicy};
use crate::data::ArrayContainer;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "meta.json";
const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: Stage,
    /// Epochs completed.
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub policy: TrainablePolicy,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: ParamStore, adam: AdamState, cfg: &TrainConfig, epoch: usize) -> Self {
        Self {
            params,
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                stage: cfg.stage,
                epoch,
                global_step: adam.step,
                seed: cfg.seed,
                config_hash: cfg.model.hash(),
                policy: cfg.policy,
                config: cfg.clone(),
            },
            adam,
        }
    }

    pub fn to_container(&self) -> Result<ArrayContainer> {
        let mut c = ArrayContainer::new();
        let meta = serde_json::to_vec(&self.meta).expect("serialisable");
        c.insert_bytes(META, meta)?;
        for (name, t) in self.params.iter() {
            c.insert(format!("{PARAM}{name}"), t.clone())?;
        }
        for (prefix, moments) in [(MOMENT1, &self.adam.m), (MOMENT2, &self.adam.v)] {
            for (name, values) in moments {
                let shape = self.params.get(name)?.shape().to_vec();
                c.insert(
                    format!("{prefix}{name}"),
                    Tensor::new(shape, values.clone())?,
                )?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &ArrayContainer) -> Result<Self> {
        let meta_bytes = c
            .get_bytes(META)
            .ok_or_else(|| Error::Format("checkpoint lacks meta.json".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            step: meta.global_step,
            ..AdamState::default()
        };
        for (name, t) in c.tensors() {
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix(MOMENT1) {
                adam.m.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix(MOMENT2) {
                adam.v.insert(n.to_string(), t.data().to_vec());
            } else {
                return Err(Error::Format(format!(
                    "unexpected checkpoint entry `{name}`"
                )));
            }
        }
        Ok(Self { params, adam, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&ArrayContainer::read(path)?)
    }

    /// Fails unless the checkpoint was produced for `model`'s shapes.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        let want = model.hash();
        if self.meta.config_hash != want {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the requested model ({want})",
                self.meta.config_hash
            )));
        }
        Ok(())
    }
}

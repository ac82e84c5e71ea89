//! Named parameter storage and per-pass binding onto a [`Graph`].
//!
//! Parameter names are dotted paths (`f.blocks.3.attn.qkv.w`). LayerNorm
//! affine parameters are the only ones named `*.gamma` / `*.beta`, which is
//! how normalisation parameters are recognised throughout the crate.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Reconstruction decoder prefix; everything under it is dropped after Stage 1.
pub const DECODER_PREFIX: &str = "dec.";

pub fn is_layer_norm(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

pub fn is_decoder(name: &str) -> bool {
    name.starts_with(DECODER_PREFIX)
}

pub fn is_adapter(name: &str) -> bool {
    name.starts_with("adapter_a.") || name.starts_with("adapter_v.")
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Parameters of the representation network φ (tokenizers, embeddings, f, g).
pub fn is_representation(name: &str) -> bool {
    !(is_decoder(name) || is_adapter(name) || is_head(name))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    LayerNorm,
    NonLayerNorm,
}

impl ParamFilter {
    pub fn accepts(self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::LayerNorm => is_layer_norm(name),
            ParamFilter::NonLayerNorm => !is_layer_norm(name),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only entries whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Exact scalar count of parameters matching `filter`.
    pub fn count(&self, filter: ParamFilter) -> usize {
        self.count_where(|n| filter.accepts(n))
    }

    pub fn count_where(&self, mut pred: impl FnMut(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

/// Standard-normal draws truncated to ±2σ, scaled by `std`.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let v: f32 = normal.sample(rng);
        if v.abs() <= 2.0 {
            break v * std;
        }
    })
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Initialisation helpers that write into a store under a name prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let w = trunc_normal(self.rng, &[fan_in, fan_out], 0.02);
        self.store.insert(format!("{prefix}.w"), w);
        self.store
            .insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.store
            .insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]));
        self.store
            .insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }

    pub fn table(&mut self, name: &str, shape: &[usize]) {
        let t = trunc_normal(self.rng, shape, 0.02);
        self.store.insert(name, t);
    }
}

/// Decides which parameters receive gradients in a pass.
pub type TrainablePredicate<'p> = &'p dyn Fn(&str) -> bool;

/// Binds store parameters onto a graph, each name at most once, so that a
/// parameter used in several places is a single leaf and its gradient
/// accumulates across every use.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            graph: Graph::new(),
            store,
            trainable: Box::new(trainable),
            bound: HashMap::new(),
        }
    }

    /// Inference-only session: nothing requires gradients.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.graph.leaf(value, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// The graph leaf for a bound parameter, if it has been used.
    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Runs backward from `loss` and returns gradients of every trainable
    /// bound parameter, keyed by name.
    pub fn gradients(&mut self, loss: Var) -> Result<BTreeMap<String, Vec<f32>>> {
        self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.graph.requires_grad(v) {
                continue;
            }
            let g = self
                .graph
                .take_grad(v)
                .unwrap_or_else(|| vec![0.0; self.graph.value(v).numel()]);
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.graph.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.graph.layer_norm(x, gamma, beta, LN_EPS)
    }
}

pub const LN_EPS: f32 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_over_512_has_1024_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Init {
            store: &mut store,
            rng: &mut rng,
        }
        .layer_norm("n", 512);
        assert_eq!(store.count(ParamFilter::All), 1024);
        assert_eq!(store.count(ParamFilter::LayerNorm), 1024);
    }

    #[test]
    fn filters_partition_the_store() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        init.linear("a", 3, 4);
        init.layer_norm("a.norm", 4);
        init.table("pos", &[5, 4]);
        let all = store.count(ParamFilter::All);
        assert_eq!(
            store.count(ParamFilter::LayerNorm) + store.count(ParamFilter::NonLayerNorm),
            all
        );
        assert_eq!(all, 12 + 4 + 8 + 20);
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn session_binds_each_name_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2]));
        let mut s = Session::new(&store, |_| true);
        let a = s.p("w").unwrap();
        let b = s.p("w").unwrap();
        assert_eq!(a, b);
        let sum = s.graph.add(a, b).unwrap();
        let loss = s.graph.sum(sum);
        let grads = s.gradients(loss).unwrap();
        assert_eq!(grads["w"], vec![2.0, 2.0]);
    }
}

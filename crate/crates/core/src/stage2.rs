//! Stage 2: caption knowledge injection through dual-path contrastive
//! learning, tuning only LayerNorm parameters of the representation network.

use std::collections::{BTreeSet, HashSet};

use rand::seq::index;
use rand::Rng;

use crate::backbone::pooled_modalities;
use crate::captions::CaptionEmbeddings;
use crate::config::{ModelConfig, TrainConfig, TrainablePolicy};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{info_nce, info_nce_symmetric};
use crate::params::{is_adapter, is_layer_norm, is_representation, Init, ParamStore, Session};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::Modality;

fn adapter_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Audio => "adapter_a",
        Modality::Video => "adapter_v",
    }
}

/// Adds both caption adapters: `D_text → 4D → D` with GELU and an output LayerNorm.
pub fn init_adapters(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let mut init = Init { store, rng };
    for m in [Modality::Audio, Modality::Video] {
        let p = adapter_prefix(m);
        init.linear(&format!("{p}.fc1"), cfg.text_dim, 4 * cfg.dim);
        init.linear(&format!("{p}.fc2"), 4 * cfg.dim, cfg.dim);
        init.layer_norm(&format!("{p}.norm"), cfg.dim);
    }
}

/// Maps caption embeddings `[B, D_text]` into model space `[B, D]`.
pub fn adapt(sess: &mut Session, embeddings: Var, modality: Modality) -> Result<Var> {
    let p = adapter_prefix(modality);
    let w = sess.p(&format!("{p}.fc1.w"))?;
    let expected = sess.graph.shape(w)[0];
    let got = sess.graph.value(embeddings).last_dim();
    if got != expected {
        return Err(Error::Config(format!(
            "caption embedding width {got} does not match adapter input width {expected}"
        )));
    }
    let h = sess.linear(embeddings, &format!("{p}.fc1"))?;
    let h = sess.graph.gelu(h);
    let h = sess.linear(h, &format!("{p}.fc2"))?;
    sess.layer_norm(h, &format!("{p}.norm"))
}

#[derive(Clone, Copy, Debug)]
pub struct DualPath {
    pub l_at: Var,
    pub l_vt: Var,
    pub total: Var,
}

impl DualPath {
    pub fn values(&self, g: &Graph) -> (f32, f32, f32) {
        (
            g.value(self.l_at).item(),
            g.value(self.l_vt).item(),
            g.value(self.total).item(),
        )
    }
}

/// `L_AT = InfoNCE(z_A, C_A)`, `L_VT = InfoNCE(z_V, C_V)`, `total = α·L_AT + β·L_VT`.
#[allow(clippy::too_many_arguments)]
pub fn dual_path_loss(
    g: &mut Graph,
    z_a: Var,
    z_v: Var,
    c_a: Var,
    c_v: Var,
    alpha: f32,
    beta: f32,
    tau: f32,
    symmetric: bool,
) -> Result<DualPath> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) {
        return Err(Error::Parameter(format!(
            "alpha and beta must be non-negative with a positive sum, got {alpha}, {beta}"
        )));
    }
    let nce = |g: &mut Graph, a, b| {
        if symmetric {
            info_nce_symmetric(g, a, b, tau)
        } else {
            info_nce(g, a, b, tau)
        }
    };
    let l_at = nce(g, z_a, c_a)?;
    let l_vt = nce(g, z_v, c_v)?;
    let wa = g.scale(l_at, alpha);
    let wv = g.scale(l_vt, beta);
    let total = g.add(wa, wv)?;
    Ok(DualPath { l_at, l_vt, total })
}

/// Names of the parameters a policy lets the optimizer update.
pub fn trainable_mask(store: &ParamStore, policy: TrainablePolicy) -> BTreeSet<String> {
    store
        .names()
        .filter(|n| match policy {
            TrainablePolicy::All => true,
            TrainablePolicy::LayernormOnly => {
                (is_representation(n) && is_layer_norm(n)) || is_adapter(n)
            }
            TrainablePolicy::AllFrozen => false,
        })
        .map(str::to_string)
        .collect()
}

/// Picks `round(fraction·n)` (at least 2) sample indices, sorted.
pub fn select_subset(n: usize, fraction: f32, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let k = ((fraction as f64 * n as f64).round() as usize).max(2);
    if k > n {
        return Err(Error::Data(format!(
            "subset of {k} samples requested from {n}"
        )));
    }
    let mut r = rng::stream(seed, "stage2-subset", &[n as u64]);
    let mut idx = index::sample(&mut r, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Samples whose audio and video captions are both available.
pub fn captioned<'s>(samples: &[&'s Sample], emb: &CaptionEmbeddings) -> Vec<&'s Sample> {
    samples
        .iter()
        .filter(|s| {
            [Modality::Audio, Modality::Video]
                .iter()
                .all(|&m| emb.contains_key(&(s.id.clone(), m)))
        })
        .copied()
        .collect()
}

/// Stacks the caption embeddings of `ids` for one modality.
pub fn caption_batch<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    modality: Modality,
    emb: &CaptionEmbeddings,
) -> Result<Tensor> {
    let mut rows = Vec::new();
    for id in ids {
        let t = emb.get(&(id.to_string(), modality)).ok_or_else(|| {
            Error::Data(format!(
                "sample `{id}` has no usable {} caption",
                modality.code()
            ))
        })?;
        rows.push(t.clone());
    }
    let d = rows
        .first()
        .map(Tensor::numel)
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    if rows.iter().any(|r| r.numel() != d) {
        return Err(Error::Data("caption embeddings differ in width".into()));
    }
    Tensor::new(
        vec![rows.len(), d],
        rows.into_iter().flat_map(Tensor::into_data).collect(),
    )
}

/// Adapted captions `(C_A, C_V)` for the given samples.
pub fn adapted_captions(
    sess: &mut Session,
    ids: &[&str],
    emb: &CaptionEmbeddings,
) -> Result<(Var, Var)> {
    let ea = caption_batch(ids.iter().copied(), Modality::Audio, emb)?;
    let ev = caption_batch(ids.iter().copied(), Modality::Video, emb)?;
    let ea = sess.graph.constant(ea);
    let ev = sess.graph.constant(ev);
    Ok((
        adapt(sess, ea, Modality::Audio)?,
        adapt(sess, ev, Modality::Video)?,
    ))
}

/// One Stage-2 objective: unmasked inputs through `f`, pooled per modality,
/// contrasted with adapted caption embeddings.
pub fn stage2_pass(
    sess: &mut Session,
    batch: &[&Sample],
    emb: &CaptionEmbeddings,
    cfg: &TrainConfig,
) -> Result<DualPath> {
    if batch.len() < 2 {
        return Err(Error::Contract(format!(
            "dual-path InfoNCE needs at least 2 samples, got {}",
            batch.len()
        )));
    }
    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
    let (c_a, c_v) = adapted_captions(sess, &ids, emb)?;
    let audio: Vec<_> = batch.iter().map(|s| &s.audio).collect();
    let video: Vec<_> = batch.iter().map(|s| &s.video).collect();
    let (z_a, z_v) = pooled_modalities(sess, &audio, &video, &cfg.model)?;
    dual_path_loss(
        &mut sess.graph,
        z_a,
        z_v,
        c_a,
        c_v,
        cfg.alpha,
        cfg.beta,
        cfg.tau,
        cfg.symmetric,
    )
}

/// Caption term for joint training: the dual-path objective over the rows of
/// a Stage-1 batch that have captions. `None` when fewer than two do.
pub fn joint_caption_term(
    sess: &mut Session,
    batch: &[&Sample],
    z_a: Var,
    z_v: Var,
    emb: &CaptionEmbeddings,
    allowed: &HashSet<String>,
    cfg: &TrainConfig,
) -> Result<Option<DualPath>> {
    let rows: Vec<usize> = (0..batch.len())
        .filter(|&i| {
            let id = &batch[i].id;
            allowed.contains(id)
                && emb.contains_key(&(id.clone(), Modality::Audio))
                && emb.contains_key(&(id.clone(), Modality::Video))
        })
        .collect();
    if rows.len() < 2 {
        return Ok(None);
    }
    let ids: Vec<&str> = rows.iter().map(|&i| batch[i].id.as_str()).collect();
    let (c_a, c_v) = adapted_captions(sess, &ids, emb)?;
    let za = sess.graph.gather_rows(z_a, &rows)?;
    let zv = sess.graph.gather_rows(z_v, &rows)?;
    dual_path_loss(
        &mut sess.graph,
        za,
        zv,
        c_a,
        c_v,
        cfg.alpha,
        cfg.beta,
        cfg.tau,
        cfg.symmetric,
    )
    .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_representation;
    use crate::params::ParamFilter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(g: &mut Graph, n: usize) -> Var {
        // Every row identical: all similarities equal.
        g.constant(Tensor::full(&[n, 3], 1.0))
    }

    #[test]
    fn weighted_total_arithmetic() {
        let mut g = Graph::new();
        let z = uniform(&mut g, 2);
        let dp = dual_path_loss(&mut g, z, z, z, z, 0.6, 0.4, 0.07, false).unwrap();
        let (la, lv, t) = dp.values(&g);
        assert!((la - 2f32.ln()).abs() < 1e-6 && (lv - 2f32.ln()).abs() < 1e-6);
        assert!((t - 2f32.ln()).abs() < 1e-6);
        let dp = dual_path_loss(&mut g, z, z, z, z, 1.0, 0.0, 0.07, false).unwrap();
        let (la, _, t) = dp.values(&g);
        assert_eq!(t, la);
        assert!(matches!(
            dual_path_loss(&mut g, z, z, z, z, 0.0, 0.0, 0.07, false),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn layernorm_policy_counts() {
        let cfg = ModelConfig::desk();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = init_representation(&cfg, &mut r);
        let ln = store.count(ParamFilter::LayerNorm);
        init_adapters(&mut store, &cfg, &mut r);
        let mask = trainable_mask(&store, TrainablePolicy::LayernormOnly);
        let ln_sites = 2 * (cfg.depth_f + cfg.depth_g) + 2;
        let repr_ln: usize = mask
            .iter()
            .filter(|n| !is_adapter(n))
            .map(|n| store.get(n).unwrap().numel())
            .sum();
        assert_eq!(repr_ln, 2 * cfg.dim * ln_sites);
        assert_eq!(repr_ln, ln);
        assert!(store
            .names()
            .filter(|n| is_adapter(n))
            .all(|n| mask.contains(n)));
        assert!(trainable_mask(&store, TrainablePolicy::AllFrozen).is_empty());
        assert_eq!(
            trainable_mask(&store, TrainablePolicy::All).len(),
            store.len()
        );
    }

    #[test]
    fn adapters_are_separate_and_checked() {
        let mut cfg = ModelConfig::desk();
        cfg.dim = 16;
        cfg.heads = 2;
        cfg.text_dim = 8;
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_adapters(&mut store, &cfg, &mut r);
        let mut sess = Session::frozen(&store);
        let x = sess
            .graph
            .constant(Tensor::from_fn(&[2, 8], |i| i as f32 * 0.1));
        let a = adapt(&mut sess, x, Modality::Audio).unwrap();
        let v = adapt(&mut sess, x, Modality::Video).unwrap();
        assert_eq!(sess.graph.shape(a), &[2, 16]);
        assert!(!sess.graph.value(a).bit_eq(sess.graph.value(v)));
        let bad = sess.graph.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            adapt(&mut sess, bad, Modality::Audio),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_input_zero_second_layer_is_layer_norm_of_bias() {
        let mut cfg = ModelConfig::desk();
        cfg.dim = 4;
        cfg.heads = 1;
        cfg.text_dim = 3;
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_adapters(&mut store, &cfg, &mut r);
        store.insert("adapter_a.fc2.w", Tensor::zeros(&[16, 4]));
        store.insert(
            "adapter_a.fc2.b",
            Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let mut sess = Session::frozen(&store);
        let x = sess.graph.constant(Tensor::zeros(&[1, 3]));
        let out = adapt(&mut sess, x, Modality::Audio).unwrap();
        let expect = [-1.3416408, -0.4472136, 0.4472136, 1.3416408];
        for (o, e) in sess.graph.value(out).data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-4, "{o} vs {e}");
        }
    }

    #[test]
    fn subset_selection() {
        let s = select_subset(400, 0.1, 3).unwrap();
        assert_eq!(s.len(), 40);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_subset(400, 0.1, 3).unwrap());
        assert_eq!(select_subset(10, 0.01, 3).unwrap().len(), 2);
        assert!(select_subset(10, 0.0, 3).is_err());
    }

    #[test]
    fn missing_caption_names_sample() {
        let emb = CaptionEmbeddings::new();
        let err = caption_batch(["s00007"], Modality::Video, &emb).unwrap_err();
        assert!(
            matches!(&err, Error::Data(m) if m.contains("s00007")),
            "{err}"
        );
    }
}

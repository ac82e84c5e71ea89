//! Stage 1: masked reconstruction plus audio-visual InfoNCE.

use rand::seq::index;
use rand::Rng;

use crate::backbone::{block_stack, embed_inputs, encode_modality, fuse};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{info_nce, info_nce_symmetric, recon_loss};
use crate::params::{Init, ParamStore, Session, DECODER_PREFIX};
use crate::tensor::Tensor;
use crate::tokenizer::{audio_patches, video_patches, AUDIO_PATCH_DIM, VIDEO_PATCH_DIM};

/// Disjoint visible/masked token indices of one sequence, each sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

pub fn mask_count(n: usize, ratio: f32) -> usize {
    (ratio as f64 * n as f64).round() as usize
}

/// Masks exactly `round(ratio·n)` tokens chosen uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f32, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!(
            "mask ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if n < 2 {
        return Err(Error::Parameter(format!(
            "masking needs at least 2 tokens, got {n}"
        )));
    }
    let count = mask_count(n, ratio);
    if count == 0 || count == n {
        return Err(Error::Parameter(format!(
            "ratio {ratio} over {n} tokens leaves no {} tokens",
            if count == 0 { "masked" } else { "visible" }
        )));
    }
    let mut is_masked = vec![false; n];
    for i in index::sample(rng, n, count) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_masked[i]);
    Ok(MaskPlan { n, visible, masked })
}

/// Adds the reconstruction decoder (`dec.*`).
pub fn init_decoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let mut init = Init { store, rng };
    let d = cfg.dec_dim;
    init.linear("dec.embed", cfg.dim, d);
    init.table("dec.mask_token", &[d]);
    init.table("dec.pos_a", &[cfg.audio_tokens(), d]);
    init.table("dec.pos_v", &[cfg.video_tokens(), d]);
    for i in 0..cfg.dec_depth {
        crate::backbone::init_block(&mut init, &format!("dec.blocks.{i}"), d, cfg.mlp_ratio);
    }
    init.layer_norm("dec.norm", d);
    init.linear("dec.pred_a", d, AUDIO_PATCH_DIM);
    init.linear("dec.pred_v", d, VIDEO_PATCH_DIM);
}

/// Removes every decoder array.
pub fn discard_decoder(store: &mut ParamStore) {
    store.retain(|n| !n.starts_with(DECODER_PREFIX));
}

/// Rows of `[batch·n, D]` selected by per-sample index lists.
fn flat_rows(plans: &[MaskPlan], pick: impl Fn(&MaskPlan) -> &[usize]) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| pick(p).iter().map(move |&i| b * p.n + i))
        .collect()
}

fn uniform_len(plans: &[MaskPlan], pick: impl Fn(&MaskPlan) -> usize) -> Result<usize> {
    let first = plans
        .first()
        .map(&pick)
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    if plans.iter().any(|p| pick(p) != first) {
        return Err(Error::Contract(
            "mask plans in a batch must share their counts".into(),
        ));
    }
    Ok(first)
}

/// Predicts raw patches at the masked positions from the fused visible
/// encodings. Returns `(pred_a, pred_v)` with one row per masked token, in
/// sample-major order.
pub fn reconstruct(
    sess: &mut Session,
    fused_visible: Var,
    plans_a: &[MaskPlan],
    plans_v: &[MaskPlan],
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let batch = plans_a.len();
    if plans_v.len() != batch {
        return Err(Error::Contract(format!(
            "{batch} audio mask plans but {} video mask plans",
            plans_v.len()
        )));
    }
    let nva = uniform_len(plans_a, |p| p.visible.len())?;
    let nvv = uniform_len(plans_v, |p| p.visible.len())?;
    let (n_a, n_v) = (plans_a[0].n, plans_v[0].n);
    let rows = sess.graph.value(fused_visible).rows();
    if rows != batch * (nva + nvv) {
        return Err(Error::Contract(format!(
            "fused encoding has {rows} rows, masks expect {} visible tokens",
            batch * (nva + nvv)
        )));
    }
    let x = sess.linear(fused_visible, "dec.embed")?;
    let mask_token = sess.p("dec.mask_token")?;
    let with_mask = sess.graph.concat_rows(&[x, mask_token])?;
    let mask_row = rows;
    let seq = n_a + n_v;
    let mut idx = Vec::with_capacity(batch * seq);
    for b in 0..batch {
        let base = b * (nva + nvv);
        let mut slot = vec![mask_row; seq];
        for (j, &p) in plans_a[b].visible.iter().enumerate() {
            slot[p] = base + j;
        }
        for (j, &p) in plans_v[b].visible.iter().enumerate() {
            slot[n_a + p] = base + nva + j;
        }
        idx.extend(slot);
    }
    let full = sess.graph.gather_rows(with_mask, &idx)?;
    let pos_a = sess.p("dec.pos_a")?;
    let pos_v = sess.p("dec.pos_v")?;
    let table = sess.graph.concat_rows(&[pos_a, pos_v])?;
    if sess.graph.value(table).rows() != seq {
        return Err(Error::Config(format!(
            "decoder position tables hold {} rows, sequence has {seq}",
            sess.graph.value(table).rows()
        )));
    }
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = sess.graph.gather_rows(table, &pos_idx)?;
    let h = sess.graph.add(full, pos)?;
    let h = block_stack(
        sess,
        h,
        "dec",
        cfg.dec_depth,
        cfg.dec_heads,
        &vec![seq; batch],
    )?;
    let h = sess.layer_norm(h, "dec.norm")?;
    let rows_a: Vec<usize> = plans_a
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked.iter().map(move |&i| b * seq + i))
        .collect();
    let rows_v: Vec<usize> = plans_v
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked.iter().map(move |&i| b * seq + n_a + i))
        .collect();
    let ha = sess.graph.gather_rows(h, &rows_a)?;
    let hv = sess.graph.gather_rows(h, &rows_v)?;
    let pred_a = sess.linear(ha, "dec.pred_a")?;
    let pred_v = sess.linear(hv, "dec.pred_v")?;
    Ok((pred_a, pred_v))
}

fn standardize_rows(t: &mut Tensor) {
    let d = t.last_dim();
    for row in t.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

/// Stacked raw patches of a batch: `([B·N_a, 256], [B·N_v, 1536])`.
pub fn patch_targets(batch: &[&Sample], normalize: bool) -> Result<(Tensor, Tensor)> {
    let stack = |ps: Vec<Tensor>| -> Result<Tensor> {
        let d = ps[0].last_dim();
        let rows = ps.iter().map(Tensor::rows).sum();
        let mut t = Tensor::new(
            vec![rows, d],
            ps.into_iter().flat_map(Tensor::into_data).collect(),
        )?;
        if normalize {
            standardize_rows(&mut t);
        }
        Ok(t)
    };
    let a = stack(
        batch
            .iter()
            .map(|s| audio_patches(&s.audio))
            .collect::<Result<_>>()?,
    )?;
    let v = stack(
        batch
            .iter()
            .map(|s| video_patches(&s.video))
            .collect::<Result<_>>()?,
    )?;
    Ok((a, v))
}

/// Graph nodes of one Stage-1 pass.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Pass {
    pub recon_a: Var,
    pub recon_v: Var,
    pub contrast: Var,
    pub total: Var,
    /// Pooled `f` outputs used by the contrastive term, `[B, D]`.
    pub z_a: Var,
    pub z_v: Var,
}

/// Scalar values of a Stage-1 pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Losses {
    pub recon_a: f32,
    pub recon_v: f32,
    pub contrast: f32,
    pub total: f32,
    pub lambda_c: f32,
}

impl Stage1Pass {
    pub fn values(&self, g: &Graph, lambda_c: f32) -> Stage1Losses {
        Stage1Losses {
            recon_a: g.value(self.recon_a).item(),
            recon_v: g.value(self.recon_v).item(),
            contrast: g.value(self.contrast).item(),
            total: g.value(self.total).item(),
            lambda_c,
        }
    }
}

/// Draws per-sample masks for a batch.
pub fn sample_batch_masks(
    batch: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<MaskPlan>, Vec<MaskPlan>)> {
    let (n_a, n_v) = (cfg.model.audio_tokens(), cfg.model.video_tokens());
    let mut pa = Vec::with_capacity(batch);
    let mut pv = Vec::with_capacity(batch);
    for _ in 0..batch {
        pa.push(sample_mask(n_a, cfg.mask_ratio_a, rng)?);
        pv.push(sample_mask(n_v, cfg.mask_ratio_v, rng)?);
    }
    Ok((pa, pv))
}

/// Builds the Stage-1 objective for a batch with the given masks.
///
/// `total = recon_A + recon_V + λ_c · InfoNCE(z_A, z_V)`; by default the
/// contrastive features pool the visible-token outputs of `f` from the same
/// masked pass.
pub fn stage1_pass(
    sess: &mut Session,
    batch: &[&Sample],
    plans_a: &[MaskPlan],
    plans_v: &[MaskPlan],
    cfg: &TrainConfig,
) -> Result<Stage1Pass> {
    let m = &cfg.model;
    let b = batch.len();
    if b < 2 {
        return Err(Error::Contract(format!(
            "the contrastive term needs in-batch negatives: batch size {b} < 2"
        )));
    }
    if plans_a.len() != b || plans_v.len() != b {
        return Err(Error::Contract(
            "one mask plan per sample and modality is required".into(),
        ));
    }
    let audio: Vec<_> = batch.iter().map(|s| &s.audio).collect();
    let video: Vec<_> = batch.iter().map(|s| &s.video).collect();
    let (ta, tv) = embed_inputs(sess, &audio, &video, m)?;
    if plans_a[0].n != ta.count || plans_v[0].n != tv.count {
        return Err(Error::Contract(format!(
            "mask plans cover {}+{} tokens, inputs have {}+{}",
            plans_a[0].n, plans_v[0].n, ta.count, tv.count
        )));
    }
    let nva = uniform_len(plans_a, |p| p.visible.len())?;
    let nvv = uniform_len(plans_v, |p| p.visible.len())?;
    let vis_a = sess
        .graph
        .gather_rows(ta.tokens, &flat_rows(plans_a, |p| &p.visible))?;
    let vis_v = sess
        .graph
        .gather_rows(tv.tokens, &flat_rows(plans_v, |p| &p.visible))?;
    let e_a = encode_modality(sess, vis_a, &vec![nva; b], m)?;
    let e_v = encode_modality(sess, vis_v, &vec![nvv; b], m)?;
    let fused = fuse(sess, e_a, e_v, b, nva, nvv, m)?;
    let (pred_a, pred_v) = reconstruct(sess, fused, plans_a, plans_v, m)?;
    let (target_a, target_v) = patch_targets(batch, cfg.norm_targets)?;
    let recon_a = recon_loss(
        &mut sess.graph,
        pred_a,
        &target_a,
        &flat_rows(plans_a, |p| &p.masked),
    )?;
    let recon_v = recon_loss(
        &mut sess.graph,
        pred_v,
        &target_v,
        &flat_rows(plans_v, |p| &p.masked),
    )?;

    let (z_a, z_v) = if cfg.contrast_from_masked {
        (
            sess.graph.mean_segments(e_a, &vec![nva; b])?,
            sess.graph.mean_segments(e_v, &vec![nvv; b])?,
        )
    } else {
        let fa = encode_modality(sess, ta.tokens, &ta.segments(), m)?;
        let fv = encode_modality(sess, tv.tokens, &tv.segments(), m)?;
        (
            sess.graph.mean_segments(fa, &ta.segments())?,
            sess.graph.mean_segments(fv, &tv.segments())?,
        )
    };
    let contrast = if cfg.symmetric {
        info_nce_symmetric(&mut sess.graph, z_a, z_v, cfg.tau)?
    } else {
        info_nce(&mut sess.graph, z_a, z_v, cfg.tau)?
    };
    let recon = sess.graph.add(recon_a, recon_v)?;
    let weighted = sess.graph.scale(contrast, cfg.lambda_c);
    let total = sess.graph.add(recon, weighted)?;
    Ok(Stage1Pass {
        recon_a,
        recon_v,
        contrast,
        total,
        z_a,
        z_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_representation;
    use crate::config::Stage;
    use crate::data::{synth_corpus, SynthConfig};
    use crate::params::is_decoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts_are_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let p = sample_mask(100, 0.8, &mut r).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (80, 20));
        let p = sample_mask(10, 0.9, &mut r).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (9, 1));
        let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn masks_are_seeded() {
        let a = sample_mask(50, 0.8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(50, 0.8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_ratios() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for ratio in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(
                sample_mask(10, ratio, &mut r),
                Err(Error::Parameter(_))
            ));
        }
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::defaults(Stage::Stage1);
        cfg.model = ModelConfig {
            audio_frames: 32,
            mel_bins: 32,
            video_frames: 4,
            height: 32,
            width: 32,
            dim: 32,
            heads: 4,
            depth_f: 1,
            depth_g: 1,
            mlp_ratio: 2,
            dec_dim: 32,
            dec_depth: 1,
            dec_heads: 4,
            text_dim: 16,
            modality_embed: true,
        };
        cfg
    }

    fn corpus(cfg: &TrainConfig, n: usize) -> Vec<Sample> {
        synth_corpus(&SynthConfig::for_model(&cfg.model, n, 4, 3))
            .unwrap()
            .samples
    }

    #[test]
    fn stage1_pass_bookkeeping() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = init_representation(&cfg.model, &mut r);
        init_decoder(&mut store, &cfg.model, &mut r);
        let samples = corpus(&cfg, 4);
        let batch: Vec<&Sample> = samples.iter().collect();
        let (pa, pv) = sample_batch_masks(4, &cfg, &mut r).unwrap();
        let mut sess = Session::new(&store, |_| true);
        let pass = stage1_pass(&mut sess, &batch, &pa, &pv, &cfg).unwrap();
        let l = pass.values(&sess.graph, cfg.lambda_c);
        assert!(l.total.is_finite() && l.total > 0.0);
        let expect = l.recon_a + l.recon_v + cfg.lambda_c * l.contrast;
        assert!((l.total - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        assert!(matches!(
            stage1_pass(
                &mut Session::new(&store, |_| true),
                &batch[..1],
                &pa[..1],
                &pv[..1],
                &cfg
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_prediction_head_gives_mean_square_targets() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = init_representation(&cfg.model, &mut r);
        init_decoder(&mut store, &cfg.model, &mut r);
        for name in ["dec.pred_a.w", "dec.pred_a.b"] {
            let t = store.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let samples = corpus(&cfg, 4);
        let batch: Vec<&Sample> = samples.iter().take(2).collect();
        let (pa, pv) = sample_batch_masks(2, &cfg, &mut r).unwrap();
        let mut sess = Session::new(&store, |_| true);
        let pass = stage1_pass(&mut sess, &batch, &pa, &pv, &cfg).unwrap();
        let (ta, _) = patch_targets(&batch, false).unwrap();
        let rows = flat_rows(&pa, |p| &p.masked);
        let d = ta.last_dim();
        let ms: f64 = rows
            .iter()
            .flat_map(|&r| ta.row(r).iter())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            / (rows.len() * d) as f64;
        let got = sess.graph.value(pass.recon_a).item() as f64;
        assert!((got - ms).abs() < 1e-5 * ms.max(1.0), "{got} vs {ms}");
    }

    #[test]
    fn reconstruct_shape_and_length_check() {
        let cfg = tiny_cfg();
        let m = &cfg.model;
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_decoder(&mut store, m, &mut r);
        let n_a = m.audio_tokens();
        let pa = vec![MaskPlan {
            n: n_a,
            visible: vec![0],
            masked: (1..n_a).collect(),
        }];
        let pv = vec![sample_mask(m.video_tokens(), 0.5, &mut r).unwrap()];
        let nvis = 1 + pv[0].visible.len();
        let mut sess = Session::new(&store, |_| true);
        let x = sess.graph.constant(Tensor::zeros(&[nvis, m.dim]));
        let (pred_a, _) = reconstruct(&mut sess, x, &pa, &pv, m).unwrap();
        assert_eq!(sess.graph.shape(pred_a), &[n_a - 1, AUDIO_PATCH_DIM]);
        let bad = sess.graph.constant(Tensor::zeros(&[nvis + 1, m.dim]));
        assert!(matches!(
            reconstruct(&mut sess, bad, &pa, &pv, m),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn discard_removes_only_decoder() {
        let cfg = tiny_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut store = init_representation(&cfg.model, &mut r);
        let repr = store.len();
        init_decoder(&mut store, &cfg.model, &mut r);
        assert!(store.names().any(is_decoder));
        discard_decoder(&mut store);
        assert_eq!(store.len(), repr);
        assert!(!store.names().any(is_decoder));
    }
}

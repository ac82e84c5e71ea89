//! The representation network: tokenizers, the shared feature encoder `f`,
//! the fusion encoder `g`, and mean pooling.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Init, ParamStore, Session};
use crate::tokenizer::{
    add_position_and_modality, tokenize_audio, tokenize_video, AudioInput, TokenSequence,
    VideoInput, AUDIO_PATCH_DIM, VIDEO_PATCH_DIM,
};

/// Adds the parameters of one pre-norm transformer block under `prefix`.
pub fn init_block(init: &mut Init<impl Rng>, prefix: &str, dim: usize, mlp_ratio: usize) {
    init.layer_norm(&format!("{prefix}.norm1"), dim);
    init.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim);
    init.linear(&format!("{prefix}.attn.proj"), dim, dim);
    init.layer_norm(&format!("{prefix}.norm2"), dim);
    init.linear(&format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim);
    init.linear(&format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim);
}

/// Fresh representation-network parameters.
pub fn init_representation(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng,
    };
    let d = cfg.dim;
    init.linear("tok_a", AUDIO_PATCH_DIM, d);
    init.linear("tok_v", VIDEO_PATCH_DIM, d);
    init.table("pos_a", &[cfg.audio_tokens(), d]);
    init.table("pos_v", &[cfg.video_tokens(), d]);
    if cfg.modality_embed {
        init.table("mod_a", &[d]);
        init.table("mod_v", &[d]);
    }
    for i in 0..cfg.depth_f {
        init_block(&mut init, &format!("f.blocks.{i}"), d, cfg.mlp_ratio);
    }
    init.layer_norm("f.norm", d);
    for i in 0..cfg.depth_g {
        init_block(&mut init, &format!("g.blocks.{i}"), d, cfg.mlp_ratio);
    }
    if cfg.depth_g > 0 {
        init.layer_norm("g.norm", d);
    }
    store
}

/// Pre-norm block: `x + attn(norm1(x))`, then `h + mlp(norm2(h))`.
/// Attention is restricted to each sequence in `segments`.
pub fn block(
    sess: &mut Session,
    x: Var,
    prefix: &str,
    heads: usize,
    segments: &[usize],
) -> Result<Var> {
    let h = sess.layer_norm(x, &format!("{prefix}.norm1"))?;
    let qkv = sess.linear(h, &format!("{prefix}.attn.qkv"))?;
    let a = sess.graph.attention(qkv, heads, segments)?;
    let a = sess.linear(a, &format!("{prefix}.attn.proj"))?;
    let x = sess.graph.add(x, a)?;
    let h = sess.layer_norm(x, &format!("{prefix}.norm2"))?;
    let h = sess.linear(h, &format!("{prefix}.mlp.fc1"))?;
    let h = sess.graph.gelu(h);
    let h = sess.linear(h, &format!("{prefix}.mlp.fc2"))?;
    sess.graph.add(x, h)
}

/// Runs `depth` blocks named `{prefix}.blocks.{i}` without a final norm.
pub fn block_stack(
    sess: &mut Session,
    mut x: Var,
    prefix: &str,
    depth: usize,
    heads: usize,
    segments: &[usize],
) -> Result<Var> {
    for i in 0..depth {
        x = block(sess, x, &format!("{prefix}.blocks.{i}"), heads, segments)?;
    }
    Ok(x)
}

fn check_width(sess: &Session, x: Var, cfg: &ModelConfig, what: &str) -> Result<()> {
    let w = sess.graph.value(x).last_dim();
    if w != cfg.dim {
        return Err(Error::Config(format!(
            "{what} width {w} does not match model width {}",
            cfg.dim
        )));
    }
    Ok(())
}

/// The shared feature encoder `f`: `[Σ lens, D] → [Σ lens, D]`.
///
/// Both modalities go through the very same `f.*` parameters.
pub fn encode_modality(
    sess: &mut Session,
    tokens: Var,
    segments: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    check_width(sess, tokens, cfg, "token")?;
    let x = block_stack(sess, tokens, "f", cfg.depth_f, cfg.heads, segments)?;
    sess.layer_norm(x, "f.norm")
}

/// Row order of the fused sequence: for each sample, its audio tokens then
/// its video tokens, indexing into `concat_rows([audio, video])`.
pub fn fusion_order(batch: usize, n_a: usize, n_v: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (n_a + n_v));
    for b in 0..batch {
        idx.extend(b * n_a..(b + 1) * n_a);
        idx.extend(batch * n_a + b * n_v..batch * n_a + (b + 1) * n_v);
    }
    idx
}

/// The fusion encoder `g` over per-sample `[E_A ; E_V]` concatenations.
///
/// `e_a` holds `batch` audio sequences of `n_a` rows each, `e_v` likewise.
pub fn fuse(
    sess: &mut Session,
    e_a: Var,
    e_v: Var,
    batch: usize,
    n_a: usize,
    n_v: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    check_width(sess, e_a, cfg, "audio encoding")?;
    check_width(sess, e_v, cfg, "video encoding")?;
    if sess.graph.value(e_a).rows() != batch * n_a || sess.graph.value(e_v).rows() != batch * n_v {
        return Err(Error::dim(
            "fuse",
            sess.graph.shape(e_a),
            sess.graph.shape(e_v),
        ));
    }
    let both = sess.graph.concat_rows(&[e_a, e_v])?;
    let x = sess
        .graph
        .gather_rows(both, &fusion_order(batch, n_a, n_v))?;
    if cfg.depth_g == 0 {
        return Ok(x);
    }
    let segments = vec![n_a + n_v; batch];
    let x = block_stack(sess, x, "g", cfg.depth_g, cfg.heads, &segments)?;
    sess.layer_norm(x, "g.norm")
}

/// Outputs of the representation network for a batch.
#[derive(Clone, Debug)]
pub struct ReprOutput {
    pub e_a: Var,
    pub e_v: Var,
    pub fused: Var,
    pub z_a: Var,
    pub z_v: Var,
    pub z_fused: Var,
    pub batch: usize,
    pub n_a: usize,
    pub n_v: usize,
}

/// Tokenizes both modalities and adds position/modality embeddings.
pub fn embed_inputs(
    sess: &mut Session,
    audio: &[&AudioInput],
    video: &[&VideoInput],
    cfg: &ModelConfig,
) -> Result<(TokenSequence, TokenSequence)> {
    if audio.len() != video.len() {
        return Err(Error::Contract(format!(
            "{} audio inputs paired with {} video inputs",
            audio.len(),
            video.len()
        )));
    }
    let a = tokenize_audio(sess, audio)?;
    let a = add_position_and_modality(sess, &a, cfg.modality_embed)?;
    let v = tokenize_video(sess, video)?;
    let v = add_position_and_modality(sess, &v, cfg.modality_embed)?;
    Ok((a, v))
}

/// `φ(x) = g(f(τ_A(x_A)) ⊕ f(τ_V(x_V)))`, with `E_A`, `E_V` taken from `f`
/// (pre-fusion) and every pooled vector a token-wise mean.
pub fn forward_repr(
    sess: &mut Session,
    audio: &[&AudioInput],
    video: &[&VideoInput],
    cfg: &ModelConfig,
) -> Result<ReprOutput> {
    let (a, v) = embed_inputs(sess, audio, video, cfg)?;
    let e_a = encode_modality(sess, a.tokens, &a.segments(), cfg)?;
    let e_v = encode_modality(sess, v.tokens, &v.segments(), cfg)?;
    let batch = a.batch;
    let fused = fuse(sess, e_a, e_v, batch, a.count, v.count, cfg)?;
    let z_a = sess.graph.mean_segments(e_a, &a.segments())?;
    let z_v = sess.graph.mean_segments(e_v, &v.segments())?;
    let z_fused = sess
        .graph
        .mean_segments(fused, &vec![a.count + v.count; batch])?;
    Ok(ReprOutput {
        e_a,
        e_v,
        fused,
        z_a,
        z_v,
        z_fused,
        batch,
        n_a: a.count,
        n_v: v.count,
    })
}

/// Only `f` and the embeddings: `(z_A, z_V)` as `[batch, D]` each.
pub fn pooled_modalities(
    sess: &mut Session,
    audio: &[&AudioInput],
    video: &[&VideoInput],
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let (a, v) = embed_inputs(sess, audio, video, cfg)?;
    let e_a = encode_modality(sess, a.tokens, &a.segments(), cfg)?;
    let e_v = encode_modality(sess, v.tokens, &v.segments(), cfg)?;
    let z_a = sess.graph.mean_segments(e_a, &a.segments())?;
    let z_v = sess.graph.mean_segments(e_v, &v.segments())?;
    Ok((z_a, z_v))
}

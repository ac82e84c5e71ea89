//! Modality-specific tokenizers.
//!
//! Both tokenizers are non-overlapping patch extractors followed by a dense
//! projection, which is the same map as a convolution whose stride equals its
//! kernel. Audio uses 16×16 spectrogram patches; video uses 2×16×16 RGB tubes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::Session;
use crate::tensor::Tensor;

pub const PATCH: usize = 16;
pub const TUBE_FRAMES: usize = 2;
pub const AUDIO_PATCH_DIM: usize = PATCH * PATCH;
pub const VIDEO_PATCH_DIM: usize = TUBE_FRAMES * PATCH * PATCH * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "A")]
    Audio,
    #[serde(rename = "V")]
    Video,
}

impl Modality {
    pub fn code(self) -> &'static str {
        match self {
            Modality::Audio => "A",
            Modality::Video => "V",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "audio" => Ok(Modality::Audio),
            "V" | "v" | "video" => Ok(Modality::Video),
            other => Err(Error::Data(format!("unknown modality `{other}`"))),
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Video => "v",
        }
    }
}

/// Log-mel spectrogram, `[T_a, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioInput {
    pub spectrogram: Tensor,
}

/// Frame cube `[T_V, H, W, 3]` with pixels in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInput {
    pub frames: Tensor,
}

impl AudioInput {
    pub fn new(spectrogram: Tensor) -> Result<Self> {
        let input = Self { spectrogram };
        input.grid()?;
        Ok(input)
    }

    /// Patch grid `(T_a/16, F/16)`.
    pub fn grid(&self) -> Result<[usize; 2]> {
        let s = self.spectrogram.shape();
        if s.len() != 2 {
            return Err(Error::Preprocessing(format!(
                "audio spectrogram must be [T_a, F], got {s:?}"
            )));
        }
        audio_grid(s[0], s[1])
    }
}

impl VideoInput {
    pub fn new(frames: Tensor) -> Result<Self> {
        let input = Self { frames };
        input.grid()?;
        Ok(input)
    }

    /// Tube grid `(T_V/2, H/16, W/16)`.
    pub fn grid(&self) -> Result<[usize; 3]> {
        let s = self.frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Preprocessing(format!(
                "video must be [T_V, H, W, 3], got {s:?}"
            )));
        }
        video_grid(s[0], s[1], s[2])
    }
}

fn pad_to(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

pub fn audio_grid(frames: usize, bins: usize) -> Result<[usize; 2]> {
    if frames == 0 || bins == 0 || frames % PATCH != 0 || bins % PATCH != 0 {
        return Err(Error::Preprocessing(format!(
            "audio {frames}×{bins} is not divisible by {PATCH}; pad to {}×{}",
            pad_to(frames.max(1), PATCH),
            pad_to(bins.max(1), PATCH)
        )));
    }
    Ok([frames / PATCH, bins / PATCH])
}

pub fn video_grid(frames: usize, height: usize, width: usize) -> Result<[usize; 3]> {
    if frames == 0 || frames % TUBE_FRAMES != 0 {
        return Err(Error::Preprocessing(format!(
            "video frame count {frames} must be even; pad to {}",
            pad_to(frames.max(1), TUBE_FRAMES)
        )));
    }
    if height == 0 || width == 0 || height % PATCH != 0 || width % PATCH != 0 {
        return Err(Error::Preprocessing(format!(
            "video frames {height}×{width} are not divisible by {PATCH}; pad to {}×{}",
            pad_to(height.max(1), PATCH),
            pad_to(width.max(1), PATCH)
        )));
    }
    Ok([frames / TUBE_FRAMES, height / PATCH, width / PATCH])
}

/// `N_a = (T_a/16)·(F/16)`.
pub fn audio_token_count(frames: usize, bins: usize) -> Result<usize> {
    audio_grid(frames, bins).map(|g| g.iter().product())
}

/// `N_v = (T_V/2)·(H/16)·(W/16)`.
pub fn video_token_count(frames: usize, height: usize, width: usize) -> Result<usize> {
    video_grid(frames, height, width).map(|g| g.iter().product())
}

/// Flattens the spectrogram into `[N_a, 256]` patches, time-major.
pub fn audio_patches(input: &AudioInput) -> Result<Tensor> {
    let [gt, gf] = input.grid()?;
    let bins = input.spectrogram.shape()[1];
    let src = input.spectrogram.data();
    let mut out = Vec::with_capacity(gt * gf * AUDIO_PATCH_DIM);
    for pt in 0..gt {
        for pf in 0..gf {
            for dt in 0..PATCH {
                let row = (pt * PATCH + dt) * bins + pf * PATCH;
                out.extend_from_slice(&src[row..row + PATCH]);
            }
        }
    }
    Tensor::new(vec![gt * gf, AUDIO_PATCH_DIM], out)
}

/// Flattens the frame cube into `[N_v, 1536]` tubes ordered (t, y, x); each
/// tube is laid out as (frame, row, col, channel).
pub fn video_patches(input: &VideoInput) -> Result<Tensor> {
    let [gt, gy, gx] = input.grid()?;
    let s = input.frames.shape();
    let (h, w) = (s[1], s[2]);
    let src = input.frames.data();
    let mut out = Vec::with_capacity(gt * gy * gx * VIDEO_PATCH_DIM);
    for tt in 0..gt {
        for ty in 0..gy {
            for tx in 0..gx {
                for df in 0..TUBE_FRAMES {
                    let frame = tt * TUBE_FRAMES + df;
                    for dy in 0..PATCH {
                        let y = ty * PATCH + dy;
                        let start = ((frame * h + y) * w + tx * PATCH) * 3;
                        out.extend_from_slice(&src[start..start + PATCH * 3]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gt * gy * gx, VIDEO_PATCH_DIM], out)
}

/// A batch of token sequences of one modality stacked as `[batch·count, D]`.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub modality: Modality,
    pub grid: Vec<usize>,
    pub count: usize,
    pub batch: usize,
}

impl TokenSequence {
    pub fn segments(&self) -> Vec<usize> {
        vec![self.count; self.batch]
    }
}

fn stack(patches: Vec<Tensor>) -> Result<Tensor> {
    let rows: usize = patches.iter().map(Tensor::rows).sum();
    let d = patches[0].last_dim();
    let data: Vec<f32> = patches.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![rows, d], data)
}

fn check_uniform<T: PartialEq + std::fmt::Debug>(grids: &[T]) -> Result<()> {
    if grids.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Preprocessing(format!(
            "all inputs in a batch must share one shape, got grids {grids:?}"
        )));
    }
    if grids.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

/// Projects audio patches of a batch with `tok_a.w`, `tok_a.b`.
pub fn tokenize_audio(sess: &mut Session, inputs: &[&AudioInput]) -> Result<TokenSequence> {
    let grids = inputs
        .iter()
        .map(|i| i.grid())
        .collect::<Result<Vec<_>>>()?;
    check_uniform(&grids)?;
    let patches = stack(
        inputs
            .iter()
            .map(|i| audio_patches(i))
            .collect::<Result<_>>()?,
    )?;
    let x = sess.graph.constant(patches);
    let tokens = sess.linear(x, "tok_a")?;
    Ok(TokenSequence {
        tokens,
        modality: Modality::Audio,
        grid: grids[0].to_vec(),
        count: grids[0].iter().product(),
        batch: inputs.len(),
    })
}

/// Projects video tubes of a batch with `tok_v.w`, `tok_v.b`.
pub fn tokenize_video(sess: &mut Session, inputs: &[&VideoInput]) -> Result<TokenSequence> {
    let grids = inputs
        .iter()
        .map(|i| i.grid())
        .collect::<Result<Vec<_>>>()?;
    check_uniform(&grids)?;
    let patches = stack(
        inputs
            .iter()
            .map(|i| video_patches(i))
            .collect::<Result<_>>()?,
    )?;
    let x = sess.graph.constant(patches);
    let tokens = sess.linear(x, "tok_v")?;
    Ok(TokenSequence {
        tokens,
        modality: Modality::Video,
        grid: grids[0].to_vec(),
        count: grids[0].iter().product(),
        batch: inputs.len(),
    })
}

/// Adds the per-modality learnable position table (`pos_a` / `pos_v`) and,
/// when `modality_embed` is set, the modality vector (`mod_a` / `mod_v`).
pub fn add_position_and_modality(
    sess: &mut Session,
    seq: &TokenSequence,
    modality_embed: bool,
) -> Result<TokenSequence> {
    let sfx = seq.modality.suffix();
    let table = sess.p(&format!("pos_{sfx}"))?;
    let capacity = sess.graph.shape(table)[0];
    if seq.count > capacity {
        return Err(Error::Config(format!(
            "{} tokens exceed the {capacity}-entry position table of modality {}",
            seq.count,
            seq.modality.code()
        )));
    }
    let idx: Vec<usize> = (0..seq.batch).flat_map(|_| 0..seq.count).collect();
    let pos = sess.graph.gather_rows(table, &idx)?;
    let mut tokens = sess.graph.add(seq.tokens, pos)?;
    if modality_embed {
        let m = sess.p(&format!("mod_{sfx}"))?;
        tokens = sess.graph.add_row(tokens, m)?;
    }
    Ok(TokenSequence {
        tokens,
        ..seq.clone()
    })
}

//! Synthetic paired audio-visual corpus with latent emotion factors.
//!
//! Audio carries a class-specific frequency band whose loudness follows
//! arousal and whose temporal modulation rate depends on the class. Video
//! carries a tinted Gaussian blob drifting in a class-specific direction,
//! brighter for positive valence. Both are corrupted by Gaussian noise.

use std::collections::HashMap;
use std::f32::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::container::ArrayContainer;
use super::manifest::{write_manifest, Label, ManifestRow, Sample};
use crate::captions::{
    caption_corpus, embed_captions, persist_caption_store, CaptionRecord, LexiconFilter,
    SampleMeta, StubClient, StubEmbedder, DEFAULT_PASSES,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{audio_grid, video_grid, AudioInput, VideoInput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub class: usize,
    pub valence: f32,
    pub arousal: f32,
    pub dominance: f32,
}

impl Latent {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![4],
            vec![
                self.class as f32,
                self.valence,
                self.arousal,
                self.dominance,
            ],
        )
        .expect("fixed shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            [c, v, a, d] if *c >= 0.0 && c.fract() == 0.0 => Ok(Self {
                class: *c as usize,
                valence: *v,
                arousal: *a,
                dominance: *d,
            }),
            _ => Err(Error::Data(format!(
                "malformed latent array {:?}",
                t.shape()
            ))),
        }
    }

    pub fn vad(&self) -> [f32; 3] {
        [self.valence, self.arousal, self.dominance]
    }
}

/// Valence, arousal, dominance prototypes for the six emotion classes.
const PROTOTYPES: [[f32; 3]; 6] = [
    [0.7, 0.6, 0.4],
    [-0.6, -0.5, -0.4],
    [-0.6, 0.7, 0.6],
    [0.4, -0.6, 0.0],
    [-0.5, 0.6, -0.6],
    [0.3, 0.8, -0.1],
];

const JITTER: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub num_classes: usize,
    pub folds: usize,
    pub audio_frames: usize,
    pub mel_bins: usize,
    pub video_frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_noise: f32,
    pub video_noise: f32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn for_model(model: &ModelConfig, n: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            n,
            num_classes,
            folds: 5,
            audio_frames: model.audio_frames,
            mel_bins: model.mel_bins,
            video_frames: model.video_frames,
            height: model.height,
            width: model.width,
            audio_noise: 0.5,
            video_noise: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > PROTOTYPES.len() {
            return Err(Error::Config(format!(
                "num_classes must lie in 2..={}, got {}",
                PROTOTYPES.len(),
                self.num_classes
            )));
        }
        if self.n < self.num_classes {
            return Err(Error::Config(format!(
                "n = {} must be at least the class count {}",
                self.n, self.num_classes
            )));
        }
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        audio_grid(self.audio_frames, self.mel_bins)
            .and_then(|_| video_grid(self.video_frames, self.height, self.width))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Folds actually populated: rows cycle through folds in blocks of one per class.
    fn fold_count(&self) -> usize {
        self.folds.min(self.n.div_ceil(self.num_classes))
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub latents: Vec<Latent>,
}

impl Corpus {
    pub fn latent_map(&self) -> HashMap<String, Latent> {
        self.samples
            .iter()
            .zip(&self.latents)
            .map(|(s, l)| (s.id.clone(), *l))
            .collect()
    }

    pub fn metas(&self) -> Vec<SampleMeta> {
        self.samples
            .iter()
            .map(|s| SampleMeta {
                sample_id: s.id.clone(),
                seconds: s.audio.spectrogram.shape()[0] as f32 * 0.01,
            })
            .collect()
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

fn gauss(rng: &mut impl Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

fn sample_latent(class: usize, rng: &mut impl Rng) -> Latent {
    let p = PROTOTYPES[class];
    let mut j = || rng.gen_range(-JITTER..JITTER);
    let (dv, da, dd) = (j(), j(), j());
    Latent {
        class,
        valence: (p[0] + dv).clamp(-1.0, 1.0),
        arousal: (p[1] + da).clamp(-1.0, 1.0),
        dominance: (p[2] + dd).clamp(-1.0, 1.0),
    }
}

fn synth_audio(cfg: &SynthConfig, latent: &Latent, rng: &mut impl Rng) -> Tensor {
    let (t_len, f_len) = (cfg.audio_frames, cfg.mel_bins);
    let k = cfg.num_classes as f32;
    let centre = (latent.class as f32 + 0.5) / k * f_len as f32 + rng.gen_range(-0.5..0.5);
    let width = f_len as f32 / (2.5 * k);
    let amplitude = 1.0 + 0.5 * latent.arousal;
    let rate = (latent.class + 1) as f32;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(t_len * f_len);
    for t in 0..t_len {
        let envelope = 0.7 + 0.3 * (2.0 * PI * rate * t as f32 / t_len as f32 + phase).sin();
        for f in 0..f_len {
            let d = (f as f32 - centre) / width;
            let band = (-0.5 * d * d).exp();
            data.push(amplitude * envelope * band + cfg.audio_noise * gauss(rng));
        }
    }
    Tensor::new(vec![t_len, f_len], data).expect("shape matches")
}

fn tint(class: usize) -> [f32; 3] {
    let h = 2.0 * PI * class as f32 / PROTOTYPES.len() as f32;
    [
        0.5 + 0.5 * h.cos(),
        0.5 + 0.5 * (h - 2.0 * PI / 3.0).cos(),
        0.5 + 0.5 * (h + 2.0 * PI / 3.0).cos(),
    ]
}

fn synth_video(cfg: &SynthConfig, latent: &Latent, rng: &mut impl Rng) -> Tensor {
    let (tv, h, w) = (cfg.video_frames, cfg.height, cfg.width);
    let theta = 2.0 * PI * latent.class as f32 / cfg.num_classes as f32;
    let (dx, dy) = (theta.cos(), theta.sin());
    let travel = 0.5 * w.min(h) as f32;
    let (cx0, cy0) = (
        w as f32 / 2.0 - dx * travel / 2.0 + rng.gen_range(-1.5..1.5),
        h as f32 / 2.0 - dy * travel / 2.0 + rng.gen_range(-1.5..1.5),
    );
    let sigma = w.min(h) as f32 / 6.0;
    let intensity = 1.2 + 0.5 * latent.valence;
    let colour = tint(latent.class);
    let mut data = Vec::with_capacity(tv * h * w * 3);
    for t in 0..tv {
        let s = if tv > 1 {
            t as f32 / (tv - 1) as f32
        } else {
            0.0
        };
        let (cx, cy) = (cx0 + dx * travel * s, cy0 + dy * travel * s);
        for y in 0..h {
            for x in 0..w {
                let r2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let blob = intensity * (-0.5 * r2 / (sigma * sigma)).exp();
                for c in colour {
                    let v = -0.5 + blob * c + cfg.video_noise * gauss(rng);
                    data.push(v.clamp(-1.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![tv, h, w, 3], data).expect("shape matches")
}

/// Generates a balanced corpus: sample `i` has class `i % K`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let folds = cfg.fold_count();
    let mut samples = Vec::with_capacity(cfg.n);
    let mut latents = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut r = rng::stream(cfg.seed, "synth-sample", &[i as u64]);
        let latent = sample_latent(i % cfg.num_classes, &mut r);
        let audio = AudioInput::new(synth_audio(cfg, &latent, &mut r))?;
        let video = VideoInput::new(synth_video(cfg, &latent, &mut r))?;
        samples.push(Sample {
            id: sample_id(i),
            audio,
            video,
            label: Some(Label::Class(latent.class)),
            fold: (i / cfg.num_classes) % folds,
        });
        latents.push(latent);
    }
    Ok(Corpus { samples, latents })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";

/// Writes `manifest.jsonl`, `arrays/<id>.vaem` and, with `text_dim`, stub
/// captions (`captions.jsonl`) and their embeddings.
pub fn write_corpus(
    dir: &Path,
    corpus: &Corpus,
    text_dim: Option<usize>,
) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir.join("arrays")).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(corpus.samples.len());
    for (s, latent) in corpus.samples.iter().zip(&corpus.latents) {
        let rel = format!("arrays/{}.vaem", s.id);
        let mut c = ArrayContainer::new();
        c.insert("audio", s.audio.spectrogram.clone())?;
        c.insert("video", s.video.frames.clone())?;
        c.insert("latent", latent.to_tensor())?;
        c.write(&dir.join(&rel))?;
        rows.push(ManifestRow {
            sample_id: s.id.clone(),
            audio_path: format!("{rel}#audio"),
            video_path: format!("{rel}#video"),
            label: s.label.clone(),
            fold: s.fold,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &rows)?;
    if let Some(dim) = text_dim {
        let records = stub_captions(dir, corpus, dim)?;
        persist_caption_store(&dir.join(CAPTIONS_FILE), &records)?;
    }
    Ok(rows)
}

/// Stub captions for every sample, embedded with the stub embedder into `dir`.
pub fn stub_captions(dir: &Path, corpus: &Corpus, text_dim: usize) -> Result<Vec<CaptionRecord>> {
    let client = StubClient::new(corpus.latent_map(), num_classes_of(corpus));
    let mut records = caption_corpus(
        &client,
        &LexiconFilter::default(),
        &corpus.metas(),
        DEFAULT_PASSES,
    )?;
    embed_captions(dir, &mut records, &StubEmbedder::new(text_dim))?;
    Ok(records)
}

fn num_classes_of(corpus: &Corpus) -> usize {
    corpus
        .latents
        .iter()
        .map(|l| l.class + 1)
        .max()
        .unwrap_or(1)
}

/// Reads the `latent` entry of every row's audio container.
pub fn read_latents(root: &Path, rows: &[ManifestRow]) -> Result<HashMap<String, Latent>> {
    rows.iter()
        .map(|row| {
            let file = row.audio_path.split('#').next().unwrap_or(&row.audio_path);
            let c = ArrayContainer::read(&root.join(file))?;
            Ok((
                row.sample_id.clone(),
                Latent::from_tensor(c.require("latent")?)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n,
            num_classes: 4,
            folds: 5,
            audio_frames: 32,
            mel_bins: 32,
            video_frames: 4,
            height: 16,
            width: 16,
            audio_noise: 0.5,
            video_noise: 0.3,
            seed: 7,
        }
    }

    #[test]
    fn balanced_classes_and_contiguous_folds() {
        let c = synth_corpus(&small(40)).unwrap();
        let mut counts = [0; 4];
        for s in &c.samples {
            counts[s.class().unwrap()] += 1;
        }
        assert_eq!(counts, [10; 4]);
        let folds: std::collections::BTreeSet<_> = c.samples.iter().map(|s| s.fold).collect();
        assert_eq!(folds.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_corpus(&small(8)).unwrap();
        let b = synth_corpus(&small(8)).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!(x.audio.spectrogram.bit_eq(&y.audio.spectrogram));
            assert!(x.video.frames.bit_eq(&y.video.frames));
        }
        let mut other = small(8);
        other.seed = 8;
        let c = synth_corpus(&other).unwrap();
        assert!(!a.samples[0]
            .audio
            .spectrogram
            .bit_eq(&c.samples[0].audio.spectrogram));
    }

    #[test]
    fn video_in_range_and_latents_bounded() {
        let c = synth_corpus(&small(8)).unwrap();
        for (s, l) in c.samples.iter().zip(&c.latents) {
            assert!(s
                .video
                .frames
                .data()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
            assert!(l.vad().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(3);
        assert!(matches!(synth_corpus(&cfg), Err(Error::Config(_))));
        cfg.n = 8;
        cfg.mel_bins = 20;
        assert!(matches!(synth_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn latent_tensor_round_trip() {
        let l = Latent {
            class: 3,
            valence: 0.25,
            arousal: -0.5,
            dominance: 0.0,
        };
        assert_eq!(Latent::from_tensor(&l.to_tensor()).unwrap(), l);
    }
}

//! Model shape and training configuration.
//!
//! Configuration files are plain `key = value` lines (`#` starts a comment).
//! Every key can also be overridden from the command line as `--key=value`,
//! and `VAEMO_SEED` overrides `seed`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::{audio_token_count, video_token_count};

/// Architecture and input shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub audio_frames: usize,
    pub mel_bins: usize,
    pub video_frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth_f: usize,
    /// Zero makes the fusion encoder the identity (no blocks, no final norm).
    pub depth_g: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub text_dim: usize,
    pub modality_embed: bool,
}

impl ModelConfig {
    /// Desk-scale shapes that train in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            audio_frames: 64,
            mel_bins: 32,
            video_frames: 16,
            height: 32,
            width: 32,
            dim: 128,
            heads: 8,
            depth_f: 4,
            depth_g: 2,
            mlp_ratio: 4,
            dec_dim: 256,
            dec_depth: 2,
            dec_heads: 8,
            text_dim: 256,
            modality_embed: true,
        }
    }

    /// Full-size configuration: ViT-Small width, 10+2 layers, 16×160×160 clips.
    pub fn paper() -> Self {
        Self {
            audio_frames: 256,
            mel_bins: 128,
            video_frames: 16,
            height: 160,
            width: 160,
            dim: 512,
            heads: 8,
            depth_f: 10,
            depth_g: 2,
            mlp_ratio: 4,
            dec_dim: 256,
            dec_depth: 2,
            dec_heads: 8,
            text_dim: 4096,
            modality_embed: true,
        }
    }

    pub fn audio_tokens(&self) -> usize {
        audio_token_count(self.audio_frames, self.mel_bins).unwrap_or(0)
    }

    pub fn video_tokens(&self) -> usize {
        video_token_count(self.video_frames, self.height, self.width).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        audio_token_count(self.audio_frames, self.mel_bins)
            .and_then(|_| video_token_count(self.video_frames, self.height, self.width))
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::Config(format!(
                "dec_dim {} must be a positive multiple of dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.depth_f == 0 {
            return Err(Error::Config("depth_f must be at least 1".into()));
        }
        if self.mlp_ratio == 0 || self.text_dim == 0 {
            return Err(Error::Config(
                "mlp_ratio and text_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hash over everything that determines parameter shapes.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("serialisable");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stage1,
    Stage2,
    Joint,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Joint => "joint",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Categorical,
    Dimensional,
}

/// Which parameters a stage may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainablePolicy {
    All,
    LayernormOnly,
    AllFrozen,
}

impl FromStr for TrainablePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "layernorm-only" | "layernorm_only" => Ok(Self::LayernormOnly),
            "all-frozen" | "all_frozen" | "none" => Ok(Self::AllFrozen),
            other => Err(Error::Config(format!("unknown trainable policy `{other}`"))),
        }
    }
}

impl TrainablePolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::LayernormOnly => "layernorm-only",
            Self::AllFrozen => "all-frozen",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(Self::Categorical),
            "dimensional" => Ok(Self::Dimensional),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

/// Everything a training command needs. Defaults depend on the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub warmup_fraction: f32,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub mask_ratio_a: f32,
    pub mask_ratio_v: f32,
    pub lambda_c: f32,
    pub tau: f32,
    /// Stage-1 contrastive features from the masked pass (else a second, unmasked pass).
    pub contrast_from_masked: bool,
    pub norm_targets: bool,
    pub alpha: f32,
    pub beta: f32,
    pub symmetric: bool,
    pub subset_fraction: f32,
    pub policy: TrainablePolicy,
    /// Weight of the caption objective inside joint training.
    pub lambda_k: f32,
    pub task: Task,
    pub num_classes: usize,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let pretraining = !matches!(stage, Stage::Finetune);
        Self {
            stage,
            model: ModelConfig::desk(),
            epochs: match stage {
                Stage::Finetune => 5,
                _ => 10,
            },
            batch_size: match stage {
                Stage::Stage2 => 8,
                _ => 16,
            },
            base_lr: match stage {
                Stage::Stage1 | Stage::Joint => 1.2e-3,
                Stage::Stage2 => 1e-4,
                Stage::Finetune => 1e-3,
            },
            warmup_fraction: 0.05,
            adamw: AdamWConfig {
                beta1: 0.9,
                beta2: if pretraining { 0.95 } else { 0.999 },
                eps: 1e-8,
                weight_decay: if pretraining { 0.05 } else { 0.01 },
            },
            seed: 0,
            mask_ratio_a: 0.8,
            mask_ratio_v: 0.9,
            lambda_c: 0.01,
            tau: 0.07,
            contrast_from_masked: true,
            norm_targets: false,
            alpha: 0.6,
            beta: 0.4,
            symmetric: false,
            subset_fraction: 0.10,
            policy: match stage {
                Stage::Stage2 => TrainablePolicy::LayernormOnly,
                _ => TrainablePolicy::All,
            },
            lambda_k: 1.0,
            task: Task::Categorical,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.base_lr >= 0.0, "base_lr must be non-negative")?;
        check(
            (0.0..1.0).contains(&self.warmup_fraction),
            "warmup_fraction must lie in [0, 1)",
        )?;
        check(
            self.mask_ratio_a > 0.0 && self.mask_ratio_a < 1.0,
            "mask_ratio_a must lie in (0, 1)",
        )?;
        check(
            self.mask_ratio_v > 0.0 && self.mask_ratio_v < 1.0,
            "mask_ratio_v must lie in (0, 1)",
        )?;
        check(self.tau > 0.0, "tau must be positive")?;
        check(
            self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0,
            "alpha and beta must be non-negative with a positive sum",
        )?;
        check(
            self.subset_fraction > 0.0 && self.subset_fraction <= 1.0,
            "subset_fraction must lie in (0, 1]",
        )?;
        check(self.num_classes >= 2, "num_classes must be at least 2")?;
        Ok(())
    }
}

/// Raw `key = value` settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(normalize_key(key), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Applies `--key=value` and `--key value` arguments.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref).peekable();
        while let Some(arg) = it.next() {
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("unexpected argument `{arg}`")))?;
            match body.split_once('=') {
                Some((k, v)) => self.set(k, v),
                None => match it.peek() {
                    Some(v) if !v.starts_with("--") => {
                        let v = it.next().expect("peeked");
                        self.set(body, v);
                    }
                    _ => self.set(body, "true"),
                },
            }
        }
        Ok(())
    }

    /// Applies `VAEMO_SEED` if set.
    pub fn apply_env(&mut self) {
        if let Ok(seed) = std::env::var("VAEMO_SEED") {
            self.set("seed", &seed);
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
    }

    /// Fails on any key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown setting `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match self.raw("preset").unwrap_or("desk") {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let m = ModelConfig {
            audio_frames: self.get_or("audio_frames", base.audio_frames)?,
            mel_bins: self.get_or("mel_bins", base.mel_bins)?,
            video_frames: self.get_or("video_frames", base.video_frames)?,
            height: self.get_or("height", base.height)?,
            width: self.get_or("width", base.width)?,
            dim: self.get_or("dim", base.dim)?,
            heads: self.get_or("heads", base.heads)?,
            depth_f: self.get_or("depth_f", base.depth_f)?,
            depth_g: self.get_or("depth_g", base.depth_g)?,
            mlp_ratio: self.get_or("mlp_ratio", base.mlp_ratio)?,
            dec_dim: self.get_or("dec_dim", base.dec_dim)?,
            dec_depth: self.get_or("dec_depth", base.dec_depth)?,
            dec_heads: self.get_or("dec_heads", base.dec_heads)?,
            text_dim: self.get_or("text_dim", base.text_dim)?,
            modality_embed: self.get_or("modality_embed", base.modality_embed)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self, stage: Stage) -> Result<TrainConfig> {
        let d = TrainConfig::defaults(stage);
        let cfg = TrainConfig {
            stage,
            model: self.model_config()?,
            epochs: self.get_or("epochs", d.epochs)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            base_lr: self.get_or("base_lr", d.base_lr)?,
            warmup_fraction: self.get_or("warmup_fraction", d.warmup_fraction)?,
            adamw: AdamWConfig {
                beta1: self.get_or("beta1", d.adamw.beta1)?,
                beta2: self.get_or("beta2", d.adamw.beta2)?,
                eps: self.get_or("adam_eps", d.adamw.eps)?,
                weight_decay: self.get_or("weight_decay", d.adamw.weight_decay)?,
            },
            seed: self.get_or("seed", d.seed)?,
            mask_ratio_a: self.get_or("mask_ratio_a", d.mask_ratio_a)?,
            mask_ratio_v: self.get_or("mask_ratio_v", d.mask_ratio_v)?,
            lambda_c: self.get_or("lambda_c", d.lambda_c)?,
            tau: self.get_or("tau", d.tau)?,
            contrast_from_masked: self.get_or("contrast_from_masked", d.contrast_from_masked)?,
            norm_targets: self.get_or("norm_targets", d.norm_targets)?,
            alpha: self.get_or("alpha", d.alpha)?,
            beta: self.get_or("beta", d.beta)?,
            symmetric: self.get_or("symmetric", d.symmetric)?,
            subset_fraction: self.get_or("subset_fraction", d.subset_fraction)?,
            policy: self.get_or("policy", d.policy)?,
            lambda_k: self.get_or("lambda_k", d.lambda_k)?,
            task: self.get_or("task", d.task)?,
            num_classes: self.get_or("num_classes", d.num_classes)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keys understood by [`KeyValues::model_config`] and [`KeyValues::train_config`].
pub const MODEL_KEYS: &[&str] = &[
    "preset",
    "audio_frames",
    "mel_bins",
    "video_frames",
    "height",
    "width",
    "dim",
    "heads",
    "depth_f",
    "depth_g",
    "mlp_ratio",
    "dec_dim",
    "dec_depth",
    "dec_heads",
    "text_dim",
    "modality_embed",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "base_lr",
    "warmup_fraction",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "seed",
    "mask_ratio_a",
    "mask_ratio_v",
    "lambda_c",
    "tau",
    "contrast_from_masked",
    "norm_targets",
    "alpha",
    "beta",
    "symmetric",
    "subset_fraction",
    "policy",
    "lambda_k",
    "task",
    "num_classes",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_syntax_and_comments() {
        let kv = KeyValues::parse_str("# comment\nepochs = 3\n\nbase-lr=0.5 # trailing\n").unwrap();
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(kv.get::<f32>("base_lr").unwrap(), Some(0.5));
        assert!(matches!(
            KeyValues::parse_str("novalue"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn overrides_accept_both_forms() {
        let mut kv = KeyValues::parse_str("epochs = 3").unwrap();
        kv.apply_overrides(&["--epochs=7", "--subset-fraction", "0.2", "--symmetric"])
            .unwrap();
        assert_eq!(kv.raw("epochs"), Some("7"));
        assert_eq!(kv.raw("subset_fraction"), Some("0.2"));
        assert_eq!(kv.raw("symmetric"), Some("true"));
    }

    #[test]
    fn stage_defaults() {
        let s1 = TrainConfig::defaults(Stage::Stage1);
        assert_eq!(s1.base_lr, 1.2e-3);
        assert_eq!((s1.mask_ratio_a, s1.mask_ratio_v), (0.8, 0.9));
        let s2 = TrainConfig::defaults(Stage::Stage2);
        assert_eq!((s2.alpha, s2.beta), (0.6, 0.4));
        assert_eq!(s2.subset_fraction, 0.10);
        assert_eq!(s2.epochs, 10);
        assert_eq!(s2.policy, TrainablePolicy::LayernormOnly);
        let ft = TrainConfig::defaults(Stage::Finetune);
        assert_eq!(ft.adamw.beta2, 0.999);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut kv = KeyValues::new();
        kv.set("heads", "7");
        assert!(matches!(kv.model_config(), Err(Error::Config(_))));
        let mut kv = KeyValues::new();
        kv.set("alpha", "0");
        kv.set("beta", "0");
        assert!(matches!(
            kv.train_config(Stage::Stage2),
            Err(Error::Config(_))
        ));
        let mut kv = KeyValues::new();
        kv.set("epochs", "many");
        assert!(matches!(
            kv.train_config(Stage::Stage1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_shapes() {
        let a = ModelConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.dim = 64;
        assert_ne!(a.hash(), b.hash());
    }
}

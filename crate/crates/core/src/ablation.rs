//! Training-strategy comparison on synthetic data: Stage 1 followed by
//! Stage 2, Stage 1 alone, and both objectives trained together.

use std::collections::HashSet;
use std::path::Path;

use crate::captions::load_caption_embeddings;
use crate::config::{ModelConfig, Stage, TrainConfig};
use crate::data::synth::stub_captions;
use crate::data::{synth_corpus, Corpus, Sample, SynthConfig};
use crate::error::Result;
use crate::eval::EvalReport;
use crate::finetune::cross_validate;
use crate::params::ParamStore;
use crate::stage2::{captioned, select_subset};
use crate::train::{
    init_pretraining, prepare_stage2, train_joint, train_stage1, train_stage2, Run, JOINT_COLUMNS,
    STAGE1_COLUMNS, STAGE2_COLUMNS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    TwoStage,
    Stage1Only,
    Joint,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::TwoStage, Arm::Stage1Only, Arm::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Arm::TwoStage => "two-stage",
            Arm::Stage1Only => "stage1-only",
            Arm::Joint => "joint",
        }
    }
}

/// Corpus sizes, noise levels and per-stage configurations of one comparison.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub num_classes: usize,
    pub pretrain_n: usize,
    pub downstream_n: usize,
    /// Noise of the unlabelled pre-training corpus (audio, video).
    pub pretrain_noise: (f32, f32),
    /// Noise of the labelled downstream corpus (audio, video).
    pub downstream_noise: (f32, f32),
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub joint: TrainConfig,
    pub finetune: TrainConfig,
    pub folds: Vec<usize>,
}

impl AblationConfig {
    /// Desk-scale defaults with a downstream corpus four times noisier than
    /// the pre-training one, so that fine-tuning does not saturate.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let synth = SynthConfig::for_model(&model, 1, 1, 0);
        let mut stage1 = TrainConfig::defaults(Stage::Stage1);
        let mut stage2 = TrainConfig::defaults(Stage::Stage2);
        let mut joint = TrainConfig::defaults(Stage::Joint);
        let mut finetune = TrainConfig::defaults(Stage::Finetune);
        for c in [&mut stage1, &mut stage2, &mut joint, &mut finetune] {
            c.model = model.clone();
        }
        Self {
            num_classes: finetune.num_classes,
            model,
            pretrain_n: 400,
            downstream_n: 200,
            pretrain_noise: (synth.audio_noise, synth.video_noise),
            downstream_noise: (4.0 * synth.audio_noise, 4.0 * synth.video_noise),
            stage1,
            stage2,
            joint,
            finetune,
            folds: (0..5).collect(),
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        for t in [&mut c.stage1, &mut c.stage2, &mut c.joint, &mut c.finetune] {
            t.seed = seed;
        }
        c
    }

    pub fn pretrain_corpus(&self, seed: u64) -> Result<Corpus> {
        let mut s =
            SynthConfig::for_model(&self.model, self.pretrain_n, self.num_classes, 2 * seed);
        (s.audio_noise, s.video_noise) = self.pretrain_noise;
        synth_corpus(&s)
    }

    pub fn downstream_corpus(&self, seed: u64) -> Result<Corpus> {
        let mut s = SynthConfig::for_model(
            &self.model,
            self.downstream_n,
            self.num_classes,
            2 * seed + 1,
        );
        (s.audio_noise, s.video_noise) = self.downstream_noise;
        s.folds = self.folds.len().max(1);
        synth_corpus(&s)
    }
}

/// Pre-trained networks and downstream reports of every arm for one seed.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub stage1: ParamStore,
    pub two_stage: ParamStore,
    pub joint: ParamStore,
    pub reports: Vec<(Arm, EvalReport)>,
    pub downstream: Corpus,
}

impl AblationRun {
    pub fn uar(&self, arm: Arm) -> f64 {
        self.reports
            .iter()
            .find(|(a, _)| *a == arm)
            .map_or(f64::NAN, |(_, r)| r.uar)
    }

    pub fn params(&self, arm: Arm) -> &ParamStore {
        match arm {
            Arm::TwoStage => &self.two_stage,
            Arm::Stage1Only => &self.stage1,
            Arm::Joint => &self.joint,
        }
    }
}

/// Runs all three arms for `seed`. Stub captions are written under `dir`.
///
/// Stage 2 and the caption term of joint training see the same randomly
/// chosen caption subset.
pub fn run_ablation(cfg: &AblationConfig, seed: u64, dir: &Path) -> Result<AblationRun> {
    let cfg = cfg.with_seed(seed);
    let pre = cfg.pretrain_corpus(seed)?;
    let down = cfg.downstream_corpus(seed)?;
    let records = stub_captions(dir, &pre, cfg.model.text_dim)?;
    let emb = load_caption_embeddings(dir, &records)?;
    let pre_s: Vec<&Sample> = pre.samples.iter().collect();

    let mut s1 = Run::fresh(init_pretraining(&cfg.stage1), &STAGE1_COLUMNS);
    train_stage1(&mut s1, &pre_s, &cfg.stage1, None, None)?;

    let subset = select_subset(pre_s.len(), cfg.stage2.subset_fraction, seed)?;
    let chosen: Vec<&Sample> = subset.iter().map(|&i| pre_s[i]).collect();
    let chosen = captioned(&chosen, &emb);
    let mut s2 = Run::fresh(
        prepare_stage2(s1.params.clone(), &cfg.stage2),
        &STAGE2_COLUMNS,
    );
    train_stage2(&mut s2, &chosen, &emb, &cfg.stage2, None)?;

    let allowed: HashSet<String> = chosen.iter().map(|s| s.id.clone()).collect();
    let mut joint = Run::fresh(init_pretraining(&cfg.joint), &JOINT_COLUMNS);
    train_joint(&mut joint, &pre_s, &emb, &allowed, &cfg.joint)?;

    let mut run = AblationRun {
        seed,
        stage1: s1.params,
        two_stage: s2.params,
        joint: joint.params,
        reports: Vec::new(),
        downstream: down,
    };
    let down_s: Vec<&Sample> = run.downstream.samples.iter().collect();
    for arm in Arm::ALL {
        let report = cross_validate(run.params(arm), &down_s, &cfg.finetune, &cfg.folds)?;
        run.reports.push((arm, report));
    }
    Ok(run)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn corpora_differ_per_role_and_seed() {
        let c = AblationConfig::desk();
        let a = c.pretrain_corpus(1).unwrap();
        let b = c.downstream_corpus(1).unwrap();
        assert_eq!(a.samples.len(), 400);
        assert_eq!(b.samples.len(), 200);
        assert_ne!(a.samples[0].audio, b.samples[0].audio);
        assert_ne!(
            c.pretrain_corpus(2).unwrap().samples[0].audio,
            a.samples[0].audio
        );
    }
}

//! Downstream heads: one linear layer over the mean-pooled fused sequence.

use rand::Rng;

use crate::backbone::forward_repr;
use crate::config::{ModelConfig, Task, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{aggregate_folds, EvalReport, FoldPredictions};
use crate::graph::Var;
use crate::losses::cross_entropy;
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;
use crate::train::{prepare_finetune, train_finetune, Run, FINETUNE_COLUMNS};

/// Output width of a task head.
pub fn head_width(task: Task, num_classes: usize) -> usize {
    match task {
        Task::Categorical => num_classes,
        Task::Dimensional => 3,
    }
}

pub fn init_head(store: &mut ParamStore, dim: usize, out: usize, rng: &mut impl Rng) {
    Init { store, rng }.linear("head", dim, out);
}

/// Head outputs `[B, K]` for a batch.
pub fn head_outputs(sess: &mut Session, batch: &[&Sample], cfg: &ModelConfig) -> Result<Var> {
    let audio: Vec<_> = batch.iter().map(|s| &s.audio).collect();
    let video: Vec<_> = batch.iter().map(|s| &s.video).collect();
    let repr = forward_repr(sess, &audio, &video, cfg)?;
    sess.linear(repr.z_fused, "head")
}

/// Cross-entropy over classes or mean squared error over valence, arousal, dominance.
pub fn task_loss(sess: &mut Session, outputs: Var, batch: &[&Sample], task: Task) -> Result<Var> {
    match task {
        Task::Categorical => {
            let labels = batch
                .iter()
                .map(|s| s.class())
                .collect::<Result<Vec<_>>>()?;
            cross_entropy(&mut sess.graph, outputs, &labels)
        }
        Task::Dimensional => {
            let width = sess.graph.value(outputs).last_dim();
            if width != 3 {
                return Err(Error::Data(format!(
                    "dimensional task needs a 3-output head, found {width}"
                )));
            }
            let targets = batch.iter().map(|s| s.vad()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(vec![batch.len(), 3], targets.concat())?;
            sess.graph.mse_const(outputs, &t)
        }
    }
}

pub fn finetune_loss(
    sess: &mut Session,
    batch: &[&Sample],
    cfg: &ModelConfig,
    task: Task,
) -> Result<Var> {
    let out = head_outputs(sess, batch, cfg)?;
    task_loss(sess, out, batch, task)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Head outputs for every sample, computed in inference batches.
pub fn predict(
    store: &ParamStore,
    samples: &[&Sample],
    cfg: &ModelConfig,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut sess = Session::frozen(store);
        let y = head_outputs(&mut sess, chunk, cfg)?;
        let t = sess.graph.value(y);
        out.extend(t.data().chunks(t.last_dim()).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Fine-tunes a copy of `params` once per fold on the other folds and
/// pools the held-out predictions.
pub fn cross_validate(
    params: &ParamStore,
    samples: &[&Sample],
    cfg: &TrainConfig,
    folds: &[usize],
) -> Result<EvalReport> {
    if cfg.task != Task::Categorical {
        return Err(Error::Config(
            "cross-validated UAR needs the categorical task".into(),
        ));
    }
    let mut out = Vec::with_capacity(folds.len());
    for &fold in folds {
        let (test, train): (Vec<&Sample>, Vec<&Sample>) =
            samples.iter().partition(|s| s.fold == fold);
        if test.is_empty() || train.is_empty() {
            return Err(Error::Data(format!(
                "fold {fold} leaves an empty train or test split"
            )));
        }
        let mut run = Run::fresh(prepare_finetune(params.clone(), cfg), &FINETUNE_COLUMNS);
        train_finetune(&mut run, &train, cfg, None)?;
        let outputs = predict(&run.params, &test, &cfg.model, cfg.batch_size)?;
        out.push(FoldPredictions {
            fold,
            ids: test.iter().map(|s| s.id.clone()).collect(),
            preds: outputs.iter().map(|r| argmax(r)).collect(),
            labels: test.iter().map(|s| s.class()).collect::<Result<_>>()?,
        });
    }
    aggregate_folds(&out, cfg.num_classes)
}

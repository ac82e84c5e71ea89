//! Training loops for every stage, sharing one epoch/step driver with
//! deterministic batching, the cosine schedule and epoch-boundary resume.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::backbone::init_representation;
use crate::captions::CaptionEmbeddings;
use crate::checkpoint::Checkpoint;
use crate::config::{Stage, TrainConfig};
use crate::data::{batch_iter, Sample};
use crate::error::{Error, Result};
use crate::finetune::{finetune_loss, head_width, init_head};
use crate::graph::Var;
use crate::optim::{adamw_step, cosine_lr, AdamState};
use crate::params::{is_adapter, is_decoder, is_head, ParamStore, Session};
use crate::rng;
use crate::stage1::{discard_decoder, init_decoder, sample_batch_masks, stage1_pass};
use crate::stage2::{init_adapters, joint_caption_term, stage2_pass, trainable_mask};

/// Per-step scalar losses, written as CSV with a leading `step` and trailing `lr` column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f32>, f32)>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        format!("step,{},lr\n", self.columns.join(","))
    }

    pub fn row_csv(row: &(u64, Vec<f32>, f32)) -> String {
        let mut s = row.0.to_string();
        for v in &row.1 {
            write!(s, ",{v}").expect("string write");
        }
        writeln!(s, ",{}", row.2).expect("string write");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        for r in &self.rows {
            s.push_str(&Self::row_csv(r));
        }
        s
    }

    /// Every logged value of one column.
    pub fn column(&self, name: &str) -> Option<Vec<f32>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.1[i]).collect())
    }
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct Run {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub log: LossLog,
    /// Mean of the `total` column per completed epoch of this process.
    pub epoch_means: Vec<f32>,
}

impl Run {
    pub fn fresh(params: ParamStore, columns: &[&str]) -> Self {
        Self {
            params,
            adam: AdamState::default(),
            epoch: 0,
            log: LossLog::new(columns),
            epoch_means: Vec::new(),
        }
    }

    /// Continues from a checkpoint written at an epoch boundary.
    pub fn resume(ckpt: Checkpoint, columns: &[&str]) -> Self {
        Self {
            params: ckpt.params,
            adam: ckpt.adam,
            epoch: ckpt.meta.epoch,
            log: LossLog::new(columns),
            epoch_means: Vec::new(),
        }
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::new(self.params.clone(), self.adam.clone(), cfg, self.epoch)
    }
}

/// A stage objective: total loss plus the components to log (total last).
pub struct Objective {
    pub total: Var,
    pub logged: Vec<Var>,
}

pub type ObjectiveFn<'a> =
    dyn Fn(&mut Session, &[&Sample], &mut ChaCha8Rng) -> Result<Objective> + 'a;

/// Options of the shared driver.
pub struct FitOptions<'a> {
    pub trainable: BTreeSet<String>,
    pub drop_last: bool,
    /// Called after every completed epoch (checkpointing, logging).
    pub on_epoch: Option<&'a mut dyn FnMut(&Run) -> Result<()>>,
    /// Stop after this many completed epochs, as if interrupted.
    pub stop_after: Option<usize>,
}

impl FitOptions<'_> {
    pub fn new(trainable: BTreeSet<String>, drop_last: bool) -> Self {
        Self {
            trainable,
            drop_last,
            on_epoch: None,
            stop_after: None,
        }
    }
}

pub fn steps_per_epoch(n: usize, batch_size: usize, drop_last: bool) -> usize {
    if drop_last {
        n / batch_size
    } else {
        n.div_ceil(batch_size)
    }
}

/// Runs epochs `run.epoch..cfg.epochs` of `objective` over `samples`.
pub fn fit(
    run: &mut Run,
    samples: &[&Sample],
    cfg: &TrainConfig,
    objective: &ObjectiveFn,
    mut opts: FitOptions,
) -> Result<()> {
    cfg.validate()?;
    let n = samples.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = steps_per_epoch(n, bs, opts.drop_last);
    if per_epoch == 0 {
        return Err(Error::Data(format!("{n} samples yield no batches")));
    }
    let total_steps = per_epoch * cfg.epochs;
    let trainable = std::mem::take(&mut opts.trainable);
    while run.epoch < cfg.epochs {
        if opts.stop_after.is_some_and(|s| run.epoch >= s) {
            break;
        }
        let epoch = run.epoch;
        let mut sum = 0.0f64;
        let batches = batch_iter(n, bs, cfg.seed, epoch, opts.drop_last)?;
        for (i, idx) in batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&j| samples[j]).collect();
            let mut r = rng::stream(cfg.seed, "step", &[epoch as u64, i as u64]);
            let step = run.adam.step;
            let lr = cosine_lr(step as usize, total_steps, cfg.base_lr, cfg.warmup_fraction);
            let (grads, values) = {
                let mut sess = Session::new(&run.params, |name| trainable.contains(name));
                let obj = objective(&mut sess, &batch, &mut r)?;
                let values: Vec<f32> = obj
                    .logged
                    .iter()
                    .map(|&v| sess.graph.value(v).item())
                    .collect();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("loss at step {step}")));
                }
                (sess.gradients(obj.total)?, values)
            };
            adamw_step(&mut run.params, &grads, &mut run.adam, lr, &cfg.adamw)?;
            sum += *values.last().expect("total logged") as f64;
            run.log.rows.push((step, values, lr));
        }
        run.epoch += 1;
        run.epoch_means.push((sum / batches.len() as f64) as f32);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(run)?;
        }
    }
    Ok(())
}

pub const STAGE1_COLUMNS: [&str; 4] = ["recon_A", "recon_V", "contrast", "total"];
pub const STAGE2_COLUMNS: [&str; 3] = ["L_AT", "L_VT", "total"];
pub const JOINT_COLUMNS: [&str; 5] = ["recon_A", "recon_V", "contrast", "caption", "total"];
pub const FINETUNE_COLUMNS: [&str; 1] = ["total"];

/// Fresh representation network plus reconstruction decoder.
pub fn init_pretraining(cfg: &TrainConfig) -> ParamStore {
    let mut r = rng::stream(cfg.seed, "init", &[]);
    let mut store = init_representation(&cfg.model, &mut r);
    init_decoder(&mut store, &cfg.model, &mut r);
    store
}

pub fn stage1_objective(
    cfg: &TrainConfig,
) -> impl Fn(&mut Session, &[&Sample], &mut ChaCha8Rng) -> Result<Objective> + '_ {
    move |sess, batch, r| {
        let (pa, pv) = sample_batch_masks(batch.len(), cfg, r)?;
        let p = stage1_pass(sess, batch, &pa, &pv, cfg)?;
        Ok(Objective {
            total: p.total,
            logged: vec![p.recon_a, p.recon_v, p.contrast, p.total],
        })
    }
}

fn all_names(store: &ParamStore) -> BTreeSet<String> {
    store.names().map(str::to_string).collect()
}

fn expect_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "configuration is for stage `{}`, expected `{}`",
            cfg.stage.name(),
            stage.name()
        )));
    }
    Ok(())
}

/// Stage-1 pre-training from scratch, or continued from `run`.
pub fn train_stage1(
    run: &mut Run,
    samples: &[&Sample],
    cfg: &TrainConfig,
    on_epoch: Option<&mut dyn FnMut(&Run) -> Result<()>>,
    stop_after: Option<usize>,
) -> Result<()> {
    expect_stage(cfg, Stage::Stage1)?;
    let obj = stage1_objective(cfg);
    let mut opts = FitOptions::new(all_names(&run.params), true);
    opts.on_epoch = on_epoch;
    opts.stop_after = stop_after;
    fit(run, samples, cfg, &obj, opts)
}

/// Mean total of `objective` over `samples` in fixed order with fixed
/// per-batch randomness; parameters are not updated.
pub fn evaluate(
    params: &ParamStore,
    samples: &[&Sample],
    cfg: &TrainConfig,
    objective: &ObjectiveFn,
) -> Result<f32> {
    let bs = cfg.batch_size.min(samples.len());
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, batch) in samples
        .chunks(bs.max(1))
        .filter(|b| b.len() == bs)
        .enumerate()
    {
        let mut r = rng::stream(cfg.seed, "eval", &[i as u64]);
        let mut sess = Session::frozen(params);
        let o = objective(&mut sess, batch, &mut r)?;
        sum += sess.graph.value(o.total).item() as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(format!(
            "{} samples yield no batches",
            samples.len()
        )));
    }
    Ok((sum / count as f64) as f32)
}

pub fn evaluate_stage1(params: &ParamStore, samples: &[&Sample], cfg: &TrainConfig) -> Result<f32> {
    evaluate(params, samples, cfg, &stage1_objective(cfg))
}

pub fn evaluate_stage2(
    params: &ParamStore,
    samples: &[&Sample],
    emb: &CaptionEmbeddings,
    cfg: &TrainConfig,
) -> Result<f32> {
    evaluate(params, samples, cfg, &stage2_objective(emb, cfg))
}

/// Drops the decoder (and any stale head) of a Stage-1 network and adds fresh adapters.
pub fn prepare_stage2(mut params: ParamStore, cfg: &TrainConfig) -> ParamStore {
    discard_decoder(&mut params);
    params.retain(|n| !is_head(n) && !is_adapter(n));
    let mut r = rng::stream(cfg.seed, "init-adapters", &[]);
    init_adapters(&mut params, &cfg.model, &mut r);
    params
}

pub fn stage2_objective<'a>(
    emb: &'a CaptionEmbeddings,
    cfg: &'a TrainConfig,
) -> impl Fn(&mut Session, &[&Sample], &mut ChaCha8Rng) -> Result<Objective> + 'a {
    move |sess, batch, _| {
        let dp = stage2_pass(sess, batch, emb, cfg)?;
        Ok(Objective {
            total: dp.total,
            logged: vec![dp.l_at, dp.l_vt, dp.total],
        })
    }
}

/// Stage-2 knowledge injection over captioned samples.
pub fn train_stage2(
    run: &mut Run,
    samples: &[&Sample],
    emb: &CaptionEmbeddings,
    cfg: &TrainConfig,
    on_epoch: Option<&mut dyn FnMut(&Run) -> Result<()>>,
) -> Result<()> {
    expect_stage(cfg, Stage::Stage2)?;
    if run.params.names().any(is_decoder) {
        return Err(Error::Contract(
            "Stage 2 runs without the reconstruction decoder".into(),
        ));
    }
    let obj = stage2_objective(emb, cfg);
    let mut opts = FitOptions::new(trainable_mask(&run.params, cfg.policy), true);
    opts.on_epoch = on_epoch;
    fit(run, samples, cfg, &obj, opts)
}

/// Joint training: Stage-1 objective plus `λ_k` times the caption
/// objective on the captioned rows of each batch.
pub fn train_joint(
    run: &mut Run,
    samples: &[&Sample],
    emb: &CaptionEmbeddings,
    captioned: &HashSet<String>,
    cfg: &TrainConfig,
) -> Result<()> {
    expect_stage(cfg, Stage::Joint)?;
    if !run.params.names().any(is_adapter) {
        let mut r = rng::stream(cfg.seed, "init-adapters", &[]);
        init_adapters(&mut run.params, &cfg.model, &mut r);
    }
    let obj = move |sess: &mut Session, batch: &[&Sample], r: &mut ChaCha8Rng| {
        let (pa, pv) = sample_batch_masks(batch.len(), cfg, r)?;
        let p = stage1_pass(sess, batch, &pa, &pv, cfg)?;
        let (caption, total) =
            match joint_caption_term(sess, batch, p.z_a, p.z_v, emb, captioned, cfg)? {
                Some(dp) => {
                    let w = sess.graph.scale(dp.total, cfg.lambda_k);
                    (dp.total, sess.graph.add(p.total, w)?)
                }
                None => {
                    let zero = sess.graph.scale(p.contrast, 0.0);
                    (zero, p.total)
                }
            };
        Ok(Objective {
            total,
            logged: vec![p.recon_a, p.recon_v, p.contrast, caption, total],
        })
    };
    let opts = FitOptions::new(all_names(&run.params), true);
    fit(run, samples, cfg, &obj, opts)
}

/// Keeps only the representation network of a pre-trained store and adds a fresh task head.
pub fn prepare_finetune(mut params: ParamStore, cfg: &TrainConfig) -> ParamStore {
    params.retain(|n| !is_decoder(n) && !is_adapter(n) && !is_head(n));
    let mut r = rng::stream(cfg.seed, "init-head", &[]);
    init_head(
        &mut params,
        cfg.model.dim,
        head_width(cfg.task, cfg.num_classes),
        &mut r,
    );
    params
}

pub fn train_finetune(
    run: &mut Run,
    samples: &[&Sample],
    cfg: &TrainConfig,
    on_epoch: Option<&mut dyn FnMut(&Run) -> Result<()>>,
) -> Result<()> {
    expect_stage(cfg, Stage::Finetune)?;
    let obj = move |sess: &mut Session, batch: &[&Sample], _: &mut ChaCha8Rng| {
        let l = finetune_loss(sess, batch, &cfg.model, cfg.task)?;
        Ok(Objective {
            total: l,
            logged: vec![l],
        })
    };
    let mut opts = FitOptions::new(trainable_mask(&run.params, cfg.policy), false);
    opts.on_epoch = on_epoch;
    fit(run, samples, cfg, &obj, opts)
}

//! Metrics (UAR, WAR, PCC), pooled cross-validation reports, linear
//! probes and embedding export.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::forward_repr;
use crate::config::ModelConfig;
use crate::data::{ArrayContainer, Sample};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

fn check_pair(preds: usize, labels: usize) -> Result<()> {
    if preds != labels {
        return Err(Error::Data(format!(
            "{preds} predictions for {labels} labels"
        )));
    }
    if labels == 0 {
        return Err(Error::Data("metrics need at least one prediction".into()));
    }
    Ok(())
}

/// Recall of every class present in `labels`, keyed by class.
pub fn per_class_recall(preds: &[usize], labels: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_pair(preds.len(), labels.len())?;
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        let e = hits.entry(l).or_default();
        e.1 += 1;
        if p == l {
            e.0 += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|(c, (h, n))| (c, h as f64 / n as f64))
        .collect())
}

/// Unweighted average recall: the mean of per-class recalls over the classes in `labels`.
pub fn uar(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let r = per_class_recall(preds, labels)?;
    Ok(r.values().sum::<f64>() / r.len() as f64)
}

/// Weighted average recall, i.e. accuracy.
pub fn war(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Pearson correlation coefficient.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data(format!(
            "correlation needs two equal-length series of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "correlation is undefined for a constant series".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `k × k` counts; rows are true classes, columns predictions.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_pair(preds.len(), labels.len())?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Data(format!("class index outside 0..{k}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Predictions for one cross-validation fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub fold: usize,
    pub ids: Vec<String>,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub count: usize,
    pub uar: f64,
    pub war: f64,
}

/// Metrics computed once over predictions pooled from every fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub folds: Vec<FoldSummary>,
    pub uar: f64,
    pub war: f64,
    pub per_class_recall: BTreeMap<usize, f64>,
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub pooled: FoldPredictions,
}

/// Concatenates fold predictions and computes metrics on the pooled arrays.
pub fn aggregate_folds(folds: &[FoldPredictions], num_classes: usize) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::Data("no folds to aggregate".into()));
    }
    let mut seen = HashSet::new();
    let mut pooled = FoldPredictions::default();
    let mut summaries = Vec::with_capacity(folds.len());
    for f in folds {
        check_pair(f.preds.len(), f.labels.len())?;
        if f.ids.len() != f.labels.len() {
            return Err(Error::Data(format!(
                "fold {} has {} ids for {} labels",
                f.fold,
                f.ids.len(),
                f.labels.len()
            )));
        }
        for id in &f.ids {
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!(
                    "sample `{id}` appears in more than one fold"
                )));
            }
        }
        summaries.push(FoldSummary {
            fold: f.fold,
            count: f.labels.len(),
            uar: uar(&f.preds, &f.labels)?,
            war: war(&f.preds, &f.labels)?,
        });
        pooled.ids.extend(f.ids.iter().cloned());
        pooled.preds.extend(&f.preds);
        pooled.labels.extend(&f.labels);
    }
    Ok(EvalReport {
        num_classes,
        folds: summaries,
        uar: uar(&pooled.preds, &pooled.labels)?,
        war: war(&pooled.preds, &pooled.labels)?,
        per_class_recall: per_class_recall(&pooled.preds, &pooled.labels)?,
        confusion: confusion(&pooled.preds, &pooled.labels, num_classes)?,
        pooled,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable")
    }

    /// `sample_id,label,prediction` for every pooled prediction.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,label,prediction\n");
        for ((id, l), p) in self
            .pooled
            .ids
            .iter()
            .zip(&self.pooled.labels)
            .zip(&self.pooled.preds)
        {
            s.push_str(&format!("{id},{l},{p}\n"));
        }
        s
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        for (path, text) in [(json, self.to_json()), (csv, self.to_csv())] {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(text.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Pearson correlation per output dimension.
pub fn pcc_per_dimension(outputs: &[Vec<f32>], targets: &[[f32; 3]]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (d, o) in out.iter_mut().enumerate() {
        let x: Vec<f64> = outputs.iter().map(|r| r[d] as f64).collect();
        let y: Vec<f64> = targets.iter().map(|t| t[d] as f64).collect();
        *o = pcc(&x, &y)?;
    }
    Ok(out)
}

/// Standardizes columns with statistics of `train`, applied to both sets.
fn standardize(train: &mut [Vec<f64>], test: &mut [Vec<f64>]) {
    let d = train[0].len();
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for r in train.iter_mut().chain(test.iter_mut()) {
            r[j] = (r[j] - mean) * inv;
        }
    }
}

/// Closed-form ridge regression onto one-hot targets, solved in the dual
/// (`n × n`) so wide inputs stay cheap. Returns test predictions.
pub fn ridge_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    num_classes: usize,
    lambda: f64,
) -> Result<Vec<usize>> {
    if train_x.is_empty() || train_x.len() != train_y.len() {
        return Err(Error::Data("probe needs one label per training row".into()));
    }
    let mut tr = train_x.to_vec();
    let mut te = test_x.to_vec();
    standardize(&mut tr, &mut te);
    let n = tr.len();
    let d = tr[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| tr[i][j]);
    let mut y = DMatrix::zeros(n, num_classes);
    for (i, &c) in train_y.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Data(format!(
                "label {c} outside {num_classes} classes"
            )));
        }
        y[(i, c)] = 1.0;
    }
    let ones = DVector::from_element(n, 1.0 / n as f64);
    let y_mean = y.transpose() * &ones;
    for i in 0..n {
        for c in 0..num_classes {
            y[(i, c)] -= y_mean[c];
        }
    }
    let mut gram = &x * x.transpose();
    for i in 0..n {
        gram[(i, i)] += lambda;
    }
    let alpha = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?
        .solve(&y);
    let w = x.transpose() * alpha;
    Ok(te
        .iter()
        .map(|r| {
            let row = DMatrix::from_row_slice(1, d, r);
            let scores = row * &w;
            let s: Vec<f32> = (0..num_classes)
                .map(|c| (scores[(0, c)] + y_mean[c]) as f32)
                .collect();
            crate::finetune::argmax(&s)
        })
        .collect())
}

/// Mean-pooled fused representations `[n, D]` of `samples`.
pub fn fused_embeddings(
    store: &ParamStore,
    samples: &[&Sample],
    cfg: &ModelConfig,
    batch_size: usize,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * cfg.dim);
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut sess = Session::frozen(store);
        let audio: Vec<_> = chunk.iter().map(|s| &s.audio).collect();
        let video: Vec<_> = chunk.iter().map(|s| &s.video).collect();
        let r = forward_repr(&mut sess, &audio, &video, cfg)?;
        data.extend_from_slice(sess.graph.value(r.z_fused).data());
    }
    Tensor::new(vec![samples.len(), cfg.dim], data)
}

/// Writes `z_fused` (`[n, D]`) and `labels` (`[n]`, class index or −1) to a container.
pub fn export_embeddings(
    store: &ParamStore,
    samples: &[&Sample],
    cfg: &ModelConfig,
    out: &Path,
) -> Result<Tensor> {
    let z = fused_embeddings(store, samples, cfg, 32)?;
    let labels: Vec<f32> = samples
        .iter()
        .map(|s| s.class().map(|c| c as f32).unwrap_or(-1.0))
        .collect();
    let mut c = ArrayContainer::new();
    c.insert("z_fused", z.clone())?;
    c.insert("labels", Tensor::new(vec![samples.len()], labels)?)?;
    c.write(out)?;
    Ok(z)
}

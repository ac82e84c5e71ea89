//! Scalar objectives built from graph primitives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One-directional InfoNCE with cosine similarity:
/// `mean_i −log( exp(s_ii/τ) / Σ_j exp(s_ij/τ) )`.
///
/// Row `i` of `positives` is the positive for row `i` of `anchors`; every
/// other row of `positives` is an in-batch negative.
pub fn info_nce(g: &mut Graph, anchors: Var, positives: Var, tau: f32) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let (sa, sp) = (g.shape(anchors).to_vec(), g.shape(positives).to_vec());
    if sa.len() != 2 || sa != sp {
        return Err(Error::dim("info_nce", &sa, &sp));
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::Contract(format!(
            "InfoNCE needs at least 2 pairs for in-batch negatives, got {n}"
        )));
    }
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    let pt = g.transpose(p)?;
    let sim = g.matmul(a, pt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let lse = g.logsumexp_rows(logits);
    let diag: Vec<usize> = (0..n).collect();
    let pos = g.pick_rows(logits, &diag)?;
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean(per_row))
}

/// Average of both InfoNCE directions.
pub fn info_nce_symmetric(g: &mut Graph, a: Var, b: Var, tau: f32) -> Result<Var> {
    let ab = info_nce(g, a, b, tau)?;
    let ba = info_nce(g, b, a, tau)?;
    let s = g.add(ab, ba)?;
    Ok(g.scale(s, 0.5))
}

/// Mean squared error over masked positions only.
///
/// `pred` holds one row per masked position, in the order of `masked_rows`,
/// which index into the full `targets` patch matrix.
pub fn recon_loss(
    g: &mut Graph,
    pred: Var,
    targets: &Tensor,
    masked_rows: &[usize],
) -> Result<Var> {
    if masked_rows.is_empty() {
        return Err(Error::Contract(
            "reconstruction loss over an empty mask".into(),
        ));
    }
    let d = targets.last_dim();
    if g.shape(pred) != [masked_rows.len(), d] {
        return Err(Error::dim(
            "recon_loss",
            g.shape(pred),
            &[masked_rows.len(), d],
        ));
    }
    let mut data = Vec::with_capacity(masked_rows.len() * d);
    for &r in masked_rows {
        if r >= targets.rows() {
            return Err(Error::Contract(format!("masked row {r} outside targets")));
        }
        data.extend_from_slice(targets.row(r));
    }
    let t = Tensor::new(vec![masked_rows.len(), d], data)?;
    g.mse_const(pred, &t)
}

/// Softmax cross-entropy averaged over rows.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = g.value(logits).last_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    let lse = g.logsumexp_rows(logits);
    let pick = g.pick_rows(logits, labels)?;
    let per_row = g.sub(lse, pick)?;
    Ok(g.mean(per_row))
}

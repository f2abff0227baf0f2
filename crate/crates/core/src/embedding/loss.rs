//! Contrastive and classification losses with analytic gradients.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Norm floor used when normalising projections for cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// Loss value with its gradient w.r.t. the loss input.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: DMatrix<f64>,
}

/// Shared core of SimCLR and SupCon.
///
/// Rows `0..n_anchors` act as anchors; the positives of anchor `i` are all
/// other rows with the same `group`. Similarities are cosine similarities
/// divided by `temperature`; the denominator runs over every row but the
/// anchor. Anchors without positives contribute nothing.
fn contrastive(
    projections: &DMatrix<f64>,
    group: &[usize],
    n_anchors: usize,
    temperature: f64,
) -> Result<LossGrad> {
    let n = projections.nrows();
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two rows"));
    }
    // normalise rows
    let norms: Vec<f64> = projections
        .row_iter()
        .map(|r| r.norm().max(NORM_EPS))
        .collect();
    let mut unit = projections.clone();
    for (i, mut row) in unit.row_iter_mut().enumerate() {
        row /= norms[i];
    }
    let sim = &unit * unit.transpose() / temperature;

    // Column i of `gt` holds ∂loss/∂sim[i, ·] for anchor i (sim is symmetric,
    // so column access stays contiguous).
    let mut gt = DMatrix::<f64>::zeros(n, n);
    let mut loss = 0.0;
    let mut active = 0usize;
    let mut probs = vec![0.0; n];
    for i in 0..n_anchors {
        let gi = group[i];
        let n_pos = group.iter().enumerate().filter(|&(j, &g)| j != i && g == gi).count();
        if n_pos == 0 {
            continue;
        }
        active += 1;
        let col = sim.column(i);
        let col = col.as_slice();
        let row_max = col
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        let mut denom = 0.0;
        for (j, p) in probs.iter_mut().enumerate() {
            *p = if j == i { 0.0 } else { (col[j] - row_max).exp() };
            denom += *p;
        }
        let log_denom = row_max + denom.ln();
        let inv_pos = 1.0 / n_pos as f64;
        let inv_denom = 1.0 / denom;
        let mut pos_sum = 0.0;
        let mut out = gt.column_mut(i);
        let out = out.as_mut_slice();
        for j in 0..n {
            if j == i {
                continue;
            }
            if group[j] == gi {
                pos_sum += col[j];
                out[j] = probs[j] * inv_denom - inv_pos;
            } else {
                out[j] = probs[j] * inv_denom;
            }
        }
        loss += log_denom - pos_sum * inv_pos;
    }
    if active == 0 {
        return Err(Error::DegenerateBatch(
            "no anchor has a positive partner in the batch".into(),
        ));
    }

    // ∂loss/∂u = (G + Gᵀ) U / τ, then project through the normalisation.
    let d_unit = (&gt * &unit + gt.tr_mul(&unit)) / temperature;
    let mut grad = DMatrix::zeros(n, projections.ncols());
    for i in 0..n {
        let u = unit.row(i);
        let du = d_unit.row(i);
        let radial = u.dot(&du);
        let scale = 1.0 / norms[i];
        let mut out = grad.row_mut(i);
        if norms[i] > NORM_EPS {
            out.copy_from(&((du - u * radial) * scale));
        } else {
            out.copy_from(&(du * scale));
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Supervised contrastive loss, summed over anchors:
/// `Σ_i −1/|P(i)| Σ_{p∈P(i)} log( exp(s_ip/τ) / Σ_{j≠i} exp(s_ij/τ) )`.
pub fn supcon_loss(projections: &DMatrix<f64>, labels: &[usize], temperature: f64) -> Result<LossGrad> {
    if labels.len() != projections.nrows() {
        return Err(Error::invalid("one label per projection row required"));
    }
    contrastive(projections, labels, projections.nrows(), temperature)
}

/// SimCLR (NT-Xent) loss for `n` augmented pairs stacked as
/// `[z_0 … z_{n−1}; z̃_0 … z̃_{n−1}]`. Each `z_i` is an anchor whose only
/// positive is `z̃_i`; the sum runs over the `n` anchors.
pub fn simclr_loss(projections: &DMatrix<f64>, temperature: f64) -> Result<LossGrad> {
    let rows = projections.nrows();
    if rows % 2 != 0 {
        return Err(Error::invalid("SimCLR needs an even number of rows (paired views)"));
    }
    let n = rows / 2;
    if n < 2 {
        return Err(Error::invalid("SimCLR needs at least two pairs"));
    }
    let group: Vec<usize> = (0..rows).map(|r| r % n).collect();
    contrastive(projections, &group, n, temperature)
}

/// Mean softmax cross-entropy of `logits` (n × C) against integer labels.
pub fn ce_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<LossGrad> {
    let (n, c) = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::invalid("one label per logit row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} ≥ {c} classes")));
    }
    let mut grad = DMatrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.max();
        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + denom.ln();
        loss += lse - logits[(i, labels[i])];
        for j in 0..c {
            let p = (logits[(i, j)] - m).exp() / denom;
            grad[(i, j)] = (p - if j == labels[i] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok(LossGrad {
        loss: loss * inv_n,
        grad,
    })
}

/// Which contrastive objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveKind {
    SupCon,
    SimClr,
}

/// How the contrastive sum is normalised inside the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain sum over anchors.
    Sum,
    /// Sum divided by the number of batch rows.
    Mean,
}

/// Combined objective `L = L_contrastive + λ_CE · L_CE` and its pieces.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub loss: f64,
    pub contrastive: f64,
    pub ce: f64,
    pub d_projections: DMatrix<f64>,
    pub d_logits: DMatrix<f64>,
}

pub fn combined_loss(
    projections: &DMatrix<f64>,
    logits: &DMatrix<f64>,
    labels: &[usize],
    temperature: f64,
    lambda_ce: f64,
    reduction: Reduction,
) -> Result<CombinedLoss> {
    let mut con = supcon_loss(projections, labels, temperature)?;
    if reduction == Reduction::Mean {
        let s = 1.0 / projections.nrows() as f64;
        con.loss *= s;
        con.grad *= s;
    }
    let (ce, d_logits) = if lambda_ce > 0.0 {
        let ce = ce_loss(logits, labels)?;
        (ce.loss, ce.grad * lambda_ce)
    } else {
        (0.0, DMatrix::zeros(logits.nrows(), logits.ncols()))
    };
    Ok(CombinedLoss {
        loss: con.loss + lambda_ce * ce,
        contrastive: con.loss,
        ce,
        d_projections: con.grad,
        d_logits,
    })
}

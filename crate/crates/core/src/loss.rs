//! Reconstruction distances and the ELBO, in eager and graph form.

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::tape::{Graph, Mat, Var};
use crate::vae::CodeBatch;

/// Probabilities are kept this far from 0 and 1 inside logarithms.
const PROB_FLOOR: f64 = 1e-12;

/// Distance between a reconstruction and its target image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Cross-entropy minus the target entropy (Bernoulli KL): zero when the
    /// reconstruction equals the target.
    #[default]
    Bce,
    Mse,
}

/// `-t ln t - (1-t) ln(1-t)` with `0 ln 0 = 0`.
pub fn bernoulli_entropy(t: f64) -> f64 {
    -xlogy(t, t) - xlogy(1.0 - t, 1.0 - t)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Cross-entropy of target `t` under probability `p`; log arguments are
/// floored so saturated predictions stay finite.
fn bernoulli_ce(t: f64, p: f64) -> f64 {
    -xlogy(t, p.max(PROB_FLOOR)) - xlogy(1.0 - t, (1.0 - p).max(PROB_FLOOR))
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(argument(format!("shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn finite(name: &str, m: &Mat) -> Result<()> {
    if m.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN in {name}")));
    }
    Ok(())
}

/// Eager distance between probability images, summed over pixels and
/// averaged over rows.
pub fn distance(kind: Distance, pred: &Mat, target: &Mat) -> Result<f64> {
    same_shape(pred, target)?;
    finite("prediction", pred)?;
    finite("target", target)?;
    let n = pred.nrows().max(1) as f64;
    let total: f64 = match kind {
        Distance::Bce => pred
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let ce = bernoulli_ce(t, p);
                (ce - bernoulli_entropy(t)).max(0.0)
            })
            .sum(),
        Distance::Mse => pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum(),
    };
    Ok(total / n)
}

/// Per-row distance `[n, 1]` from decoder logits to a constant target.
pub fn distance_rows(g: &mut Graph, kind: Distance, logits: Var, target: &Mat) -> Var {
    assert_eq!(g.shape(logits), target.dim(), "distance target shape mismatch");
    match kind {
        Distance::Bce => {
            // softplus(l) - t*l is the logit-space cross-entropy.
            let sp = g.softplus(logits);
            let t = g.constant(target.clone());
            let tl = g.mul(t, logits);
            let ce = g.sub(sp, tl);
            let rows = g.sum_cols(ce);
            let floor = target.map_axis(ndarray::Axis(1), |r| r.iter().map(|&t| bernoulli_entropy(t)).sum::<f64>());
            let floor = g.constant(floor.insert_axis(ndarray::Axis(1)));
            g.sub(rows, floor)
        }
        Distance::Mse => {
            let p = g.sigmoid(logits);
            let t = g.constant(target.clone());
            let d = g.sub(p, t);
            let sq = g.square(d);
            g.sum_cols(sq)
        }
    }
}

/// Batch-mean distance; see [`distance_rows`].
pub fn distance_graph(g: &mut Graph, kind: Distance, logits: Var, target: &Mat) -> Var {
    let rows = distance_rows(g, kind, logits, target);
    mean_rows(g, rows)
}

/// Mean of a `[n, 1]` column.
pub fn mean_rows(g: &mut Graph, col: Var) -> Var {
    let n = g.shape(col).0.max(1) as f64;
    let s = g.sum_all(col);
    g.scale(s, 1.0 / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.recon + self.kl
    }
}

/// Per-sample KL to the standard normal prior, summed over dimensions.
pub fn kl_to_prior(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Eager ELBO terms: pixelwise BCE summed over pixels and KL summed over
/// dimensions, both averaged over the batch.
pub fn elbo_loss(x: &Mat, x_rec: &Mat, code: &CodeBatch) -> Result<ElboTerms> {
    same_shape(x, x_rec)?;
    finite("x", x)?;
    finite("x_rec", x_rec)?;
    finite("mu", &code.mu)?;
    finite("log_var", &code.log_var)?;
    if code.len() != x.nrows() {
        return Err(argument("code batch and image batch differ in length"));
    }
    let n = x.nrows().max(1) as f64;
    let recon: f64 = x
        .iter()
        .zip(x_rec.iter())
        .map(|(&t, &p)| {
            bernoulli_ce(t, p)
        })
        .sum::<f64>()
        / n;
    let kl: f64 = (0..code.len())
        .map(|i| {
            kl_to_prior(
                code.mu.row(i).as_slice().expect("row-major"),
                code.log_var.row(i).as_slice().expect("row-major"),
            )
        })
        .sum::<f64>()
        / n;
    if !recon.is_finite() || !kl.is_finite() {
        return Err(Error::Numerical(format!("ELBO not finite: recon {recon}, kl {kl}")));
    }
    Ok(ElboTerms { recon, kl })
}

/// Graph ELBO from decoder logits; returns `(recon, kl)` scalars.
pub fn elbo_graph(g: &mut Graph, x: &Mat, logits: Var, mu: Var, log_var: Var) -> (Var, Var) {
    let sp = g.softplus(logits);
    let t = g.constant(x.clone());
    let tl = g.mul(t, logits);
    let ce = g.sub(sp, tl);
    let ce_rows = g.sum_cols(ce);
    let recon = mean_rows(g, ce_rows);
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let a = g.add(mu2, var);
    let b = g.sub(a, log_var);
    let c = g.add_scalar(b, -1.0);
    let kl_rows = g.sum_cols(c);
    let kl_mean = mean_rows(g, kl_rows);
    let kl = g.scale(kl_mean, 0.5);
    (recon, kl)
}

/// Row-mean cross-entropy of logits against integer labels.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let (n, c) = g.shape(logits);
    assert_eq!(n, labels.len(), "label count mismatch");
    let ls = g.log_softmax(logits);
    let mut onehot = Mat::zeros((n, c));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let mask = g.constant(onehot);
    let picked = g.mul(ls, mask);
    let s = g.sum_all(picked);
    g.scale(s, -1.0 / n.max(1) as f64)
}

//! Class-average regularizer, supervised contrastive loss and the weighted
//! total objective.

use std::collections::BTreeMap;
use std::rc::Rc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::loss::{distance, Distance};
use crate::tape::{Graph, Mat, Var};
use crate::vae::CodeBatch;

/// Added to self-similarities so they vanish from the softmax denominator.
const SELF_MASK: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGroup {
    pub class: usize,
    pub members: Vec<usize>,
}

impl ClassGroup {
    pub fn count(&self) -> usize {
        self.members.len()
    }
}

/// Partitions batch indices by label, in ascending class order.
pub fn class_groups(labels: &[usize]) -> Vec<ClassGroup> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        map.entry(y).or_default().push(i);
    }
    map.into_iter()
        .map(|(class, members)| ClassGroup { class, members })
        .collect()
}

/// Per-class averages of `μ_p` and `exp(log_var_p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAverage {
    pub group: ClassGroup,
    pub mu_p: Vec<f64>,
    pub var_p: Vec<f64>,
}

pub fn class_average_code(code: &CodeBatch, labels: &[usize]) -> Result<Vec<ClassAverage>> {
    if code.is_empty() {
        return Err(argument("empty batch"));
    }
    if labels.len() != code.len() {
        return Err(argument("label count does not match batch"));
    }
    let dim_p = code.partition.dim_p;
    Ok(class_groups(labels)
        .into_iter()
        .map(|group| {
            let n = group.count() as f64;
            let mut mu_p = vec![0.0; dim_p];
            let mut var_p = vec![0.0; dim_p];
            for &i in &group.members {
                for d in 0..dim_p {
                    mu_p[d] += code.mu[[i, d]];
                    var_p[d] += code.log_var[[i, d]].exp();
                }
            }
            mu_p.iter_mut().for_each(|v| *v /= n);
            var_p.iter_mut().for_each(|v| *v /= n);
            ClassAverage { group, mu_p, var_p }
        })
        .collect())
}

/// `[B, B]` matrix whose row `i` averages over the members of `i`'s class.
pub fn class_average_matrix(labels: &[usize]) -> Mat {
    let n = labels.len();
    let mut a = Mat::zeros((n, n));
    for group in class_groups(labels) {
        let w = 1.0 / group.count() as f64;
        for &i in &group.members {
            for &j in &group.members {
                a[[i, j]] = w;
            }
        }
    }
    a
}

/// Graph form of the class-average sample: `z̄_p = μ̄_p + sqrt(V̄_p) ⊙ ε`,
/// one row per batch element, averaged over that element's class.
pub fn class_average_sample_graph(
    g: &mut Graph,
    mu_p: Var,
    log_var_p: Var,
    labels: &[usize],
    eps_p: &Mat,
) -> Var {
    let a = g.constant(class_average_matrix(labels));
    let mu_bar = g.matmul(a, mu_p);
    let var = g.exp(log_var_p);
    let var_bar = g.matmul(a, var);
    let sd = g.sqrt(var_bar);
    let e = g.constant(eps_p.clone());
    let noise = g.mul(sd, e);
    g.add(mu_bar, noise)
}

/// `D(x̄_rec_p, x_rec)` with `x_rec` as the target.
pub fn zp_invariance_loss(kind: Distance, x_rec: &Mat, x_bar_rec_p: &Mat) -> Result<f64> {
    distance(kind, x_bar_rec_p, x_rec)
}

/// Positive-pair weights: row `i` holds `1/|C_i|` on same-class `p ≠ i`.
fn positive_weights(labels: &[usize]) -> (Mat, usize) {
    let n = labels.len();
    let mut w = Mat::zeros((n, n));
    let mut anchors = 0;
    for group in class_groups(labels) {
        let positives = group.count() - 1;
        if positives == 0 {
            continue;
        }
        anchors += group.count();
        let v = 1.0 / positives as f64;
        for &i in &group.members {
            for &p in &group.members {
                if p != i {
                    w[[i, p]] = v;
                }
            }
        }
    }
    (w, anchors)
}

/// Row-wise L2 normalization.
pub fn l2_normalize_graph(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    let ss = g.sum_cols(sq);
    let ss = g.add_scalar(ss, 1e-12);
    let log_norm = g.log(ss);
    let inv = g.scale(log_norm, -0.5);
    let inv = g.exp(inv);
    g.mul_col(x, inv)
}

/// Supervised contrastive loss on L2-normalized rows of `features`, summed
/// over anchors. Anchors without a positive are skipped; a batch without any
/// positive pair yields 0.
pub fn supcon_graph(g: &mut Graph, features: Var, labels: &[usize], tau: f64) -> Var {
    let n = g.shape(features).0;
    assert_eq!(n, labels.len(), "label count mismatch");
    let (w, anchors) = positive_weights(labels);
    if anchors == 0 {
        warn!("contrastive batch has no positive pairs; loss set to 0");
        let zero = g.scale(features, 0.0);
        return g.sum_all(zero);
    }
    let z = l2_normalize_graph(g, features);
    let zt = g.transpose(z);
    let sim = g.matmul(z, zt);
    let sim = g.scale(sim, 1.0 / tau);
    let mut diag = Mat::zeros((n, n));
    for i in 0..n {
        diag[[i, i]] = SELF_MASK;
    }
    let diag = g.constant(diag);
    let masked = g.add(sim, diag);
    let ls = g.log_softmax(masked);
    let wv = g.constant(w);
    let picked = g.mul(ls, wv);
    let s = g.sum_all(picked);
    g.scale(s, -1.0)
}

/// Eager [`supcon_graph`].
pub fn supervised_contrastive_loss(features: &Mat, labels: &[usize], tau: f64) -> Result<f64> {
    if features.nrows() < 2 {
        return Err(argument("contrastive loss needs at least 2 samples"));
    }
    if labels.len() != features.nrows() {
        return Err(argument("label count does not match features"));
    }
    if !(tau > 0.0) {
        return Err(argument("tau must be positive"));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let l = supcon_graph(&mut g, f, labels, tau);
    Ok(g.scalar(l))
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub recon: f64,
    pub kl: f64,
    pub disentangle: f64,
    pub supcon: f64,
    pub zp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 7] = ["ce", "recon", "kl", "disentangle", "supcon", "zp", "total"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.ce,
            self.recon,
            self.kl,
            self.disentangle,
            self.supcon,
            self.zp,
            self.total,
        ]
    }

    /// `ce + recon + kl + α·dis + β·sup + γ·zp`.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.ce + self.recon + self.kl + w.alpha * self.disentangle + w.beta * self.supcon + w.gamma * self.zp
    }

    /// Errors naming the first NaN or infinite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::TERMS.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("loss term {name} is {v}")));
            }
        }
        Ok(())
    }
}

/// Combines unweighted terms into a breakdown with its weighted total.
pub fn total_loss(terms: LossBreakdown, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut out = terms;
    out.total = terms.weighted_sum(weights);
    out.check_finite()?;
    Ok(out)
}

/// Rows `perm[i]` of `x` mixed into `x` where `mask` is set.
pub(crate) fn mix_rows(g: &mut Graph, x: Var, perm: &[usize], mask: Rc<ndarray::Array2<bool>>) -> Var {
    let other = g.gather_rows(x, perm);
    g.select(x, other, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, numeric_grad};
    use crate::vae::LatentPartition;
    use ndarray::array;

    #[test]
    fn class_average_examples() {
        let p = LatentPartition::new(1, 1, 1).unwrap();
        let mu = array![[0.0, 5.0, 5.0], [2.0, 6.0, 6.0], [7.0, 1.0, 1.0]];
        let lv = array![[0.0, 0.0, 0.0], [2f64.ln(), 0.0, 0.0], [0.5, 0.0, 0.0]];
        let code = CodeBatch::new(mu, lv, p).unwrap();
        let avg = class_average_code(&code, &[1, 1, 0]).unwrap();
        assert_eq!(avg[0].group.members, vec![2]);
        assert_eq!(avg[0].mu_p, vec![7.0]);
        assert!((avg[0].var_p[0] - 0.5f64.exp()).abs() < 1e-15);
        assert_eq!(avg[1].mu_p, vec![1.0]);
        assert!((avg[1].var_p[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn supcon_closed_form() {
        let f = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let got = supervised_contrastive_loss(&f, &[0, 0, 1, 1], 1.0).unwrap();
        let want = 4.0 * (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        // Normalization makes the loss scale-free.
        let scaled = supervised_contrastive_loss(&(f * 3.5), &[0, 0, 1, 1], 1.0).unwrap();
        assert!((scaled - want).abs() < 1e-9);
    }

    #[test]
    fn supcon_all_singletons_is_zero() {
        let f = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(supervised_contrastive_loss(&f, &[0, 1, 2], 0.1).unwrap(), 0.0);
        assert!(supervised_contrastive_loss(&array![[1.0, 0.0]], &[0], 0.1).is_err());
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let f = Mat::from_shape_fn((8, 5), |(i, j)| ((i * 5 + j) as f64 * 0.71).sin() + 0.1 * j as f64);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let mut g = Graph::new();
        let v = g.input(f.clone());
        let l = supcon_graph(&mut g, v, &labels, 0.5);
        let grads = g.backward(l);
        let numeric = numeric_grad(&f, |ff| supervised_contrastive_loss(ff, &labels, 0.5).unwrap());
        assert_grad_close(grads.get(v).unwrap(), &numeric, 1e-4);
    }

    #[test]
    fn class_average_sample_with_identical_members_is_identity() {
        let mu = array![[0.3, -1.0], [0.3, -1.0], [2.0, 0.5]];
        let lv = Mat::from_elem((3, 2), -10.0);
        let eps = Mat::zeros((3, 2));
        let mut g = Graph::new();
        let m = g.constant(mu.clone());
        let v = g.constant(lv);
        let z = class_average_sample_graph(&mut g, m, v, &[4, 4, 1], &eps);
        for (a, b) in g.value(z).iter().zip(mu.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zp_loss_one_pixel_closed_form() {
        // 1-pixel decoder sigmoid(z): hand-set codes give probabilities
        // 0.7 (ordinary) and 0.4 (class-averaged).
        let x_rec = array![[0.7]];
        let x_bar = array![[0.4]];
        let want = 0.7 * (0.7f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.6).ln();
        assert!((zp_invariance_loss(Distance::Bce, &x_rec, &x_bar).unwrap() - want).abs() < 1e-12);
        assert!(zp_invariance_loss(Distance::Bce, &x_rec, &array![[0.4, 0.1]]).is_err());
    }

    #[test]
    fn zero_weights_leave_ce_plus_vae() {
        let terms = LossBreakdown {
            ce: 0.7,
            recon: 10.0,
            kl: 2.0,
            disentangle: 3.0,
            supcon: 4.0,
            zp: 5.0,
            total: 0.0,
        };
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            tau: 0.1,
        };
        assert_eq!(total_loss(terms, &zero).unwrap().total, 0.7 + 10.0 + 2.0);
        let t = total_loss(terms, &LossWeights::default()).unwrap();
        assert!((t.total - 24.7).abs() < 1e-12);
        let bad = LossBreakdown { zp: f64::NAN, ..terms };
        let err = total_loss(bad, &zero).unwrap_err().to_string();
        assert!(err.contains("zp"), "{err}");
    }
}

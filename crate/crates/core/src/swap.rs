//! Detect-and-swap: rank nuisance dimensions of a pair by divergence, keep
//! the top-k and exchange the rest.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::loss::{distance, distance_graph, Distance};
use crate::tape::{Graph, Mat, Var};
use crate::vae::{CodeBatch, GaussianCode, LatentPartition};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceForm {
    /// `KL(l ‖ m)` in the usual closed form.
    #[default]
    Standard,
    /// Variances swapped between the log and the quotient:
    /// `log(σ_l/σ_m) + (σ_m² + Δμ²)/(2σ_l²) − ½`.
    Printed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceConfig {
    pub form: DivergenceForm,
    /// Average both directions instead of using `KL(l ‖ m)` alone.
    pub symmetric: bool,
}

/// `KL(N(μ_a, e^{lv_a}) ‖ N(μ_b, e^{lv_b}))` for one dimension.
pub fn gaussian_kl(mu_a: f64, lv_a: f64, mu_b: f64, lv_b: f64) -> f64 {
    let d = mu_a - mu_b;
    0.5 * (lv_b - lv_a) + (lv_a.exp() + d * d) / (2.0 * lv_b.exp()) - 0.5
}

fn dim_divergence(cfg: DivergenceConfig, mu_l: f64, lv_l: f64, mu_m: f64, lv_m: f64) -> f64 {
    let one = |a: (f64, f64), b: (f64, f64)| match cfg.form {
        DivergenceForm::Standard => gaussian_kl(a.0, a.1, b.0, b.1),
        DivergenceForm::Printed => gaussian_kl(b.0, b.1, a.0, a.1),
    };
    let l = (mu_l, lv_l);
    let m = (mu_m, lv_m);
    if cfg.symmetric {
        0.5 * (one(l, m) + one(m, l))
    } else {
        one(l, m)
    }
}

/// Per-dimension divergence between two codes, length `d_z`.
pub fn pairwise_divergence(
    code_l: &GaussianCode,
    code_m: &GaussianCode,
    cfg: DivergenceConfig,
) -> Result<Vec<f64>> {
    if code_l.partition != code_m.partition {
        return Err(argument("codes do not share a partition"));
    }
    let values = code_l.mu.iter().chain(&code_l.log_var).chain(&code_m.mu).chain(&code_m.log_var);
    if values.clone().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite code entry in divergence".into()));
    }
    let out: Vec<f64> = (0..code_l.mu.len())
        .map(|i| {
            dim_divergence(cfg, code_l.mu[i], code_l.log_var[i], code_m.mu[i], code_m.log_var[i])
                // Rounding can leave tiny negatives at identical inputs.
                .max(0.0)
        })
        .collect();
    Ok(out)
}

/// Which nuisance dimensions stay put and which are exchanged. Indices are
/// relative to `z_n` (0 is the first nuisance dimension). Under a partial
/// amount schedule, dimensions in neither set are left unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapPlan {
    pub keep_set: BTreeSet<usize>,
    pub swap_set: BTreeSet<usize>,
    pub num_swapped: usize,
}

impl SwapPlan {
    /// Exchanges every nuisance dimension.
    pub fn full(partition: &LatentPartition) -> Self {
        let swap_set: BTreeSet<usize> = (0..partition.dim_n()).collect();
        Self {
            keep_set: BTreeSet::new(),
            num_swapped: swap_set.len(),
            swap_set,
        }
    }

    fn validate(&self, partition: &LatentPartition) -> Result<()> {
        let n = partition.dim_n();
        if self.keep_set.iter().chain(&self.swap_set).any(|&i| i >= n) {
            return Err(argument(format!("plan index outside z_n (size {n})")));
        }
        if !self.keep_set.is_disjoint(&self.swap_set) {
            return Err(argument("keep and swap sets overlap"));
        }
        if self.num_swapped != self.swap_set.len() {
            return Err(argument("num_swapped disagrees with swap_set"));
        }
        Ok(())
    }
}

/// Keeps the `k` largest divergences of `div_n` (a `z_n`-length slice),
/// ties going to the lowest index. Of the remaining dimensions, the
/// `num_swap` lowest-divergence ones are exchanged (all of them if `None`).
pub fn select_keep_set(
    div_n: &[f64],
    k: usize,
    num_swap: Option<usize>,
    partition: &LatentPartition,
) -> Result<SwapPlan> {
    let n = partition.dim_n();
    if div_n.len() != n {
        return Err(argument(format!("divergence has {} entries, z_n has {n}", div_n.len())));
    }
    if k > n {
        return Err(argument(format!("k = {k} exceeds z_n size {n}")));
    }
    if div_n.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN divergence".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Descending divergence, ascending index on ties.
    order.sort_by(|&a, &b| div_n[b].total_cmp(&div_n[a]).then(a.cmp(&b)));
    let keep_set: BTreeSet<usize> = order[..k].iter().copied().collect();
    let mut rest: Vec<usize> = order[k..].to_vec();
    rest.sort_by(|&a, &b| div_n[a].total_cmp(&div_n[b]).then(a.cmp(&b)));
    let take = num_swap.map_or(rest.len(), |s| s.min(rest.len()));
    let swap_set: BTreeSet<usize> = rest[..take].iter().copied().collect();
    Ok(SwapPlan {
        keep_set,
        num_swapped: swap_set.len(),
        swap_set,
    })
}

/// Exchanges `(μ, log_var)` on the plan's swap dimensions and on all of
/// `z_p`, giving `ẑ_l = [z_p^m, ẑ_n^l]` and `ẑ_m = [z_p^l, ẑ_n^m]`.
pub fn swap_latents(
    code_l: &GaussianCode,
    code_m: &GaussianCode,
    plan: &SwapPlan,
) -> Result<(GaussianCode, GaussianCode)> {
    let p = code_l.partition;
    if code_m.partition != p {
        return Err(argument("codes do not share a partition"));
    }
    plan.validate(&p)?;
    let mut l = code_l.clone();
    let mut m = code_m.clone();
    let dims = p.p_range().chain(plan.swap_set.iter().map(|&i| p.dim_p + i));
    for d in dims {
        std::mem::swap(&mut l.mu[d], &mut m.mu[d]);
        std::mem::swap(&mut l.log_var[d], &mut m.log_var[d]);
    }
    Ok((l, m))
}

/// Plans for a pair batch laid out as rows `0..P` (l) and `P..2P` (m).
pub fn plan_batch(
    code: &CodeBatch,
    k: usize,
    num_swap: Option<usize>,
    cfg: DivergenceConfig,
) -> Result<Vec<SwapPlan>> {
    if code.len() % 2 != 0 {
        return Err(argument("pair batch must have an even number of rows"));
    }
    let p = code.len() / 2;
    let n_range = code.partition.n_range();
    (0..p)
        .map(|i| {
            let div = pairwise_divergence(&code.row(i), &code.row(p + i), cfg)?;
            select_keep_set(&div[n_range.clone()], k, num_swap, &code.partition)
        })
        .collect()
}

/// `[P, d_z]` mask, true where a pair's coordinates are exchanged.
pub fn swap_mask(plans: &[SwapPlan], partition: &LatentPartition) -> Result<Array2<bool>> {
    let mut mask = Array2::from_elem((plans.len(), partition.d_z()), false);
    for (i, plan) in plans.iter().enumerate() {
        plan.validate(partition)?;
        for d in partition.p_range() {
            mask[[i, d]] = true;
        }
        for &j in &plan.swap_set {
            mask[[i, partition.dim_p + j]] = true;
        }
    }
    Ok(mask)
}

/// `D(x̂_l, x_l) + D(x̂_m, x_m)` on probability images; targets are the
/// ordinary reconstructions.
pub fn disentangle_loss(
    kind: Distance,
    x_rec_l: &Mat,
    x_rec_m: &Mat,
    x_hat_rec_l: &Mat,
    x_hat_rec_m: &Mat,
) -> Result<f64> {
    Ok(distance(kind, x_hat_rec_l, x_rec_l)? + distance(kind, x_hat_rec_m, x_rec_m)?)
}

/// Graph form of [`disentangle_loss`]: swapped-branch logits against
/// constant (detached) reconstruction probabilities.
pub fn disentangle_loss_graph(
    g: &mut Graph,
    kind: Distance,
    hat_logits_l: Var,
    hat_logits_m: Var,
    target_l: &Mat,
    target_m: &Mat,
) -> Var {
    let a = distance_graph(g, kind, hat_logits_l, target_l);
    let b = distance_graph(g, kind, hat_logits_m, target_m);
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Ramp the number of swapped dimensions from 1.
    pub amount: bool,
    /// Ramp the pair difference count from 1 to `k_max`.
    pub difficulty: bool,
    pub ramp_steps: usize,
    pub k_max: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            amount: true,
            difficulty: true,
            ramp_steps: 1000,
            k_max: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurriculumState {
    pub step: usize,
    pub config: CurriculumConfig,
    /// Size of `z_n`.
    pub dim_n: usize,
}

impl CurriculumState {
    pub fn new(config: CurriculumConfig, dim_n: usize) -> Result<Self> {
        if config.k_max == 0 || config.k_max > dim_n {
            return Err(Error::Config(format!(
                "k_max = {} must lie in 1..={dim_n}",
                config.k_max
            )));
        }
        Ok(Self {
            step: 0,
            config,
            dim_n,
        })
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

fn ramp(start: usize, end: usize, step: usize, ramp_steps: usize) -> usize {
    if end <= start || step >= ramp_steps {
        return end;
    }
    start + (end - start) * step / ramp_steps
}

/// `(num_swap, k_effective)` at the state's step. Without the amount
/// schedule every non-kept dimension is swapped (`num_swap = dim_n`).
pub fn curriculum_step(state: &CurriculumState) -> (usize, usize) {
    let c = &state.config;
    let k_eff = if c.difficulty {
        ramp(1, c.k_max, state.step, c.ramp_steps)
    } else {
        c.k_max
    };
    let num_swap = if c.amount {
        ramp(1, state.dim_n - c.k_max, state.step, c.ramp_steps)
    } else {
        state.dim_n
    };
    (num_swap, k_eff)
}

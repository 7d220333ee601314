use std::collections::BTreeMap;

use super::CodeFactorTable;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct IrsScore {
    pub score: f64,
    /// Robustness of each latent dim to interventions on its non-parent factors.
    pub per_dim: Vec<f64>,
    /// `[d, F]` mean within-group range caused by varying factor f, over the global range.
    pub sensitivity: Vec<Vec<f64>>,
    /// Factor each dim depends on most (`None` if it responds to nothing).
    pub parents: Vec<Option<usize>>,
}

fn range(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Interventional robustness.
///
/// For factor f, rows sharing every other factor form a group; the range of
/// z_j inside a group is how far z_j moves when only f changes. Groups with
/// fewer than two distinct f values are skipped. A dim's robustness is one
/// minus its largest normalized sensitivity to any factor other than its
/// parent. Dims are weighted by their global range; constant dims count as
/// fully robust.
pub fn irs(table: &CodeFactorTable) -> Result<IrsScore> {
    let d = table.latent_dim();
    let nf = table.num_factors();
    let factors = table.factors();
    let global: Vec<f64> = (0..d).map(|j| range(table.code(j).iter().copied())).collect();
    let mut sensitivity = vec![vec![0.0; nf]; d];
    for f in 0..nf {
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (i, row) in factors.rows().into_iter().enumerate() {
            let key: Vec<usize> = row.iter().enumerate().filter(|&(g, _)| g != f).map(|(_, &v)| v).collect();
            groups.entry(key).or_default().push(i);
        }
        let valid: Vec<&Vec<usize>> = groups
            .values()
            .filter(|rows| rows.iter().any(|&i| factors[[i, f]] != factors[[rows[0], f]]))
            .collect();
        if valid.is_empty() {
            log::warn!("irs: no group varies factor {f}; skipped");
            continue;
        }
        for j in 0..d {
            if global[j] <= 0.0 {
                continue;
            }
            let z = table.code(j);
            let total: f64 = valid.iter().map(|rows| range(rows.iter().map(|&i| z[i]))).sum();
            sensitivity[j][f] = (total / valid.len() as f64 / global[j]).clamp(0.0, 1.0);
        }
    }
    let mut per_dim = Vec::with_capacity(d);
    let mut parents = Vec::with_capacity(d);
    for s in &sensitivity {
        let parent = s
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v > 0.0)
            .fold(None, |best: Option<(usize, f64)>, (f, &v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((f, v)),
            })
            .map(|(f, _)| f);
        let worst_other = s
            .iter()
            .enumerate()
            .filter(|&(f, _)| Some(f) != parent)
            .map(|(_, &v)| v)
            .fold(0.0, f64::max);
        per_dim.push(1.0 - worst_other);
        parents.push(parent);
    }
    let weight: f64 = global.iter().sum();
    let score = if weight > 0.0 {
        per_dim.iter().zip(&global).map(|(r, w)| r * w).sum::<f64>() / weight
    } else {
        per_dim.iter().sum::<f64>() / d as f64
    };
    Ok(IrsScore { score: score.clamp(0.0, 1.0), per_dim, sensitivity, parents })
}

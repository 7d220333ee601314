use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CodeFactorTable;
use crate::error::{argument, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Candidate split thresholds per feature (quantile bins).
    pub bins: usize,
    /// Features tried per split; `None` tries all of them.
    pub max_features: Option<usize>,
    /// Rows used to fit the forests (random subset when the table is larger).
    pub max_samples: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 10, max_depth: 8, bins: 32, max_features: None, max_samples: 5000 }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.max_depth == 0 || self.bins < 2 || self.max_samples < 2 {
            return Err(argument("forest needs trees, depth and samples ≥ 1 and at least 2 bins"));
        }
        if self.max_features == Some(0) {
            return Err(argument("max_features must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DciScore {
    pub score: f64,
    /// Disentanglement of each latent dim.
    pub per_dim: Vec<f64>,
    /// Share of total importance carried by each dim.
    pub weights: Vec<f64>,
    /// `[d, F]` importance matrix.
    pub importance: Vec<Vec<f64>>,
}

/// Per-feature quantile bin edges; `binned[i][j]` is the bin of row i in feature j.
struct Binned {
    rows: Vec<Vec<u8>>,
    nbins: Vec<usize>,
}

fn quantile_bins(columns: &[Vec<f64>], bins: usize) -> Binned {
    let n = columns.first().map_or(0, |c| c.len());
    let mut rows = vec![vec![0u8; columns.len()]; n];
    let mut nbins = Vec::with_capacity(columns.len());
    for (j, col) in columns.iter().enumerate() {
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        let mut edges: Vec<f64> = (1..bins).map(|b| sorted[b * n / bins]).collect();
        edges.dedup();
        for (i, &v) in col.iter().enumerate() {
            rows[i][j] = edges.partition_point(|&e| e <= v) as u8;
        }
        nbins.push(edges.len() + 1);
    }
    Binned { rows, nbins }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    data: &'a Binned,
    labels: &'a [usize],
    classes: usize,
    cfg: &'a ForestConfig,
    importance: Vec<f64>,
}

impl TreeBuilder<'_> {
    /// `rows` may repeat (bootstrap); importance is the weighted Gini decrease.
    fn grow(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) {
        let n = rows.len() as f64;
        let mut parent = vec![0.0; self.classes];
        for &i in &rows {
            parent[self.labels[i]] += 1.0;
        }
        let impurity = gini(&parent, n);
        if depth >= self.cfg.max_depth || rows.len() < 2 || impurity <= 0.0 {
            return;
        }
        let d = self.data.nbins.len();
        let features: Vec<usize> = match self.cfg.max_features {
            Some(m) if m < d => {
                let mut f = sample(rng, d, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let mut best: Option<(usize, u8, f64)> = None;
        for &j in &features {
            let nb = self.data.nbins[j];
            let mut hist = vec![0.0; nb * self.classes];
            for &i in &rows {
                hist[self.data.rows[i][j] as usize * self.classes + self.labels[i]] += 1.0;
            }
            let mut left = vec![0.0; self.classes];
            let mut nl = 0.0;
            for b in 0..nb - 1 {
                for c in 0..self.classes {
                    left[c] += hist[b * self.classes + c];
                    nl += hist[b * self.classes + c];
                }
                let nr = n - nl;
                if nl == 0.0 || nr == 0.0 {
                    continue;
                }
                let right: Vec<f64> = parent.iter().zip(&left).map(|(p, l)| p - l).collect();
                let gain = n * impurity - nl * gini(&left, nl) - nr * gini(&right, nr);
                if gain > 1e-12 && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((j, b as u8, gain));
                }
            }
        }
        let Some((j, b, gain)) = best else { return };
        self.importance[j] += gain;
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| self.data.rows[i][j] <= b);
        self.grow(l, depth + 1, rng);
        self.grow(r, depth + 1, rng);
    }
}

/// Gini importances `[d, F]` from one bagged classification forest per factor.
///
/// Each tree's importances are normalized to sum 1 before averaging over
/// the forest. Factors with a single value get a zero column.
pub fn importance_matrix(table: &CodeFactorTable, cfg: &ForestConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let d = table.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = if table.len() > cfg.max_samples {
        let mut r = sample(&mut rng, table.len(), cfg.max_samples).into_vec();
        r.sort_unstable();
        r
    } else {
        (0..table.len()).collect()
    };
    let columns: Vec<Vec<f64>> = (0..d).map(|j| rows.iter().map(|&i| table.code(j)[i]).collect()).collect();
    let data = quantile_bins(&columns, cfg.bins.min(256));
    let mut out = vec![vec![0.0; table.num_factors()]; d];
    for f in 0..table.num_factors() {
        if !table.informative(f) {
            continue;
        }
        let all = table.factor(f);
        let labels: Vec<usize> = rows.iter().map(|&i| all[i]).collect();
        for _ in 0..cfg.trees {
            let boot: Vec<usize> = (0..labels.len()).map(|_| rng.random_range(0..labels.len())).collect();
            let mut tb = TreeBuilder {
                data: &data,
                labels: &labels,
                classes: table.levels()[f],
                cfg,
                importance: vec![0.0; d],
            };
            tb.grow(boot, 0, &mut rng);
            let total: f64 = tb.importance.iter().sum();
            if total > 0.0 {
                for j in 0..d {
                    out[j][f] += tb.importance[j] / total / cfg.trees as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Importance-weighted mean of `1 − H(row)/log F` over latent dims.
pub fn disentanglement_from_importance(importance: &[Vec<f64>]) -> DciScore {
    let nf = importance.first().map_or(0, |r| r.len());
    let row_sums: Vec<f64> = importance.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let per_dim: Vec<f64> = importance
        .iter()
        .zip(&row_sums)
        .map(|(r, &s)| {
            if s <= 0.0 {
                return 0.0;
            }
            if nf < 2 {
                return 1.0;
            }
            let h: f64 = r.iter().filter(|&&v| v > 0.0).map(|&v| -(v / s) * (v / s).ln()).sum();
            (1.0 - h / (nf as f64).ln()).clamp(0.0, 1.0)
        })
        .collect();
    let weights: Vec<f64> = row_sums.iter().map(|&s| if total > 0.0 { s / total } else { 0.0 }).collect();
    let score = per_dim.iter().zip(&weights).map(|(d, w)| d * w).sum::<f64>().clamp(0.0, 1.0);
    DciScore { score, per_dim, weights, importance: importance.to_vec() }
}

/// DCI disentanglement with tree-ensemble importances.
pub fn dci_disentanglement(table: &CodeFactorTable, cfg: &ForestConfig, seed: u64) -> Result<DciScore> {
    let r = importance_matrix(table, cfg, seed)?;
    Ok(disentanglement_from_importance(&r))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    #[test]
    fn uniform_rows_score_zero() {
        let r = vec![vec![0.25; 4]; 3];
        let s = disentanglement_from_importance(&r);
        assert!(s.score.abs() < 1e-12);
    }

    #[test]
    fn diagonal_rows_score_one_and_zero_rows_weigh_nothing() {
        let r = vec![vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]];
        let s = disentanglement_from_importance(&r);
        assert_eq!(s.score, 1.0);
        assert_eq!(s.weights[2], 0.0);
        assert_eq!(s.per_dim[2], 0.0);
    }

    #[test]
    fn one_to_one_code_concentrates_importance() {
        let factors = random_factors(3000, &[4, 8, 4], 31);
        let t = CodeFactorTable::new(one_to_one(&factors, 3, 32), factors).unwrap();
        let s = dci_disentanglement(&t, &ForestConfig::default(), 0).unwrap();
        assert!(s.score > 0.99, "{}", s.score);
        for f in 0..3 {
            assert!(s.importance[f][f] > 0.99);
        }
    }

    #[test]
    fn noise_code_scores_low() {
        let factors = random_factors(3000, &[4, 8, 4, 8, 8], 33);
        let t = CodeFactorTable::new(noise(3000, 10, 34), factors).unwrap();
        let s = dci_disentanglement(&t, &ForestConfig::default(), 0).unwrap();
        assert!(s.score < 0.1, "{}", s.score);
    }

    #[test]
    fn quantile_bins_respect_order() {
        let col = vec![vec![3.0, 1.0, 2.0, 0.0]];
        let b = quantile_bins(&col, 4);
        let bins: Vec<u8> = b.rows.iter().map(|r| r[0]).collect();
        assert_eq!(bins, vec![3, 1, 2, 0]);
    }

    #[test]
    fn bad_forest_config_rejected() {
        let cfg = ForestConfig { trees: 0, ..ForestConfig::default() };
        assert!(cfg.validate().is_err());
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mean_defined, CodeFactorTable};
use crate::error::{argument, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SapScore {
    pub score: f64,
    pub per_factor: Vec<Option<f64>>,
    /// `[d, F]` held-out accuracy of the single-dim classifiers.
    pub accuracy: Vec<Vec<f64>>,
}

/// Nearest class-mean classifier on one dimension: fit on `train`, score on `test`.
fn single_dim_accuracy(z: &[f64], v: &[usize], levels: usize, train: &[usize], test: &[usize]) -> f64 {
    let mut sum = vec![0.0; levels];
    let mut cnt = vec![0usize; levels];
    for &i in train {
        sum[v[i]] += z[i];
        cnt[v[i]] += 1;
    }
    let means: Vec<(usize, f64)> =
        (0..levels).filter(|&c| cnt[c] > 0).map(|c| (c, sum[c] / cnt[c] as f64)).collect();
    let correct = test
        .iter()
        .filter(|&&i| {
            let mut best = means[0];
            for &(c, m) in &means[1..] {
                if (z[i] - m).abs() < (z[i] - best.1).abs() {
                    best = (c, m);
                }
            }
            best.0 == v[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Mean over factors of the accuracy gap between the two best single-dim classifiers.
///
/// Rows are split into train and held-out halves by a seeded shuffle. With a
/// single latent dim the runner-up accuracy is taken as 0.
pub fn sap(table: &CodeFactorTable, seed: u64) -> Result<SapScore> {
    let n = table.len();
    if n < 2 {
        return Err(argument("sap needs at least 2 rows"));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = rows.split_at(n / 2);
    let codes: Vec<Vec<f64>> = (0..table.latent_dim()).map(|j| table.code(j).to_vec()).collect();
    let mut accuracy = vec![vec![0.0; table.num_factors()]; table.latent_dim()];
    let mut per_factor = Vec::with_capacity(table.num_factors());
    for f in 0..table.num_factors() {
        let v = table.factor(f);
        let levels = table.levels()[f];
        let mut seen: Vec<usize> = train.iter().map(|&i| v[i]).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() < 2 {
            log::warn!("sap: factor {f} has fewer than 2 values in the train half; skipped");
            per_factor.push(None);
            continue;
        }
        let mut accs: Vec<f64> = codes
            .iter()
            .map(|z| single_dim_accuracy(z, &v, levels, train, test))
            .collect();
        for (j, &a) in accs.iter().enumerate() {
            accuracy[j][f] = a;
        }
        accs.sort_by(|a, b| b.total_cmp(a));
        let second = accs.get(1).copied().unwrap_or(0.0);
        per_factor.push(Some((accs[0] - second).clamp(0.0, 1.0)));
    }
    Ok(SapScore { score: mean_defined(&per_factor), per_factor, accuracy })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    #[test]
    fn one_to_one_gap_is_one_minus_chance() {
        let cards = [4, 8, 5];
        let factors = random_factors(6000, &cards, 11);
        let t = CodeFactorTable::new(one_to_one(&factors, 3, 12), factors).unwrap();
        let s = sap(&t, 0).unwrap();
        for (f, &c) in cards.iter().enumerate() {
            assert!((s.accuracy[f][f] - 1.0).abs() < 1e-12);
            let gap = s.per_factor[f].unwrap();
            let chance = 1.0 / c as f64;
            assert!((gap - (1.0 - chance)).abs() < 0.06, "factor {f}: {gap}");
        }
    }

    #[test]
    fn noise_scores_near_zero() {
        for seed in 0..5 {
            let factors = random_factors(4000, &[4, 8, 4, 8, 8], seed);
            let t = CodeFactorTable::new(noise(4000, 10, seed + 100), factors).unwrap();
            let s = sap(&t, seed).unwrap();
            assert!(s.score < 0.05, "seed {seed}: {}", s.score);
        }
    }

    #[test]
    fn classifier_uses_nearest_mean() {
        let z = [0.0, 0.0, 10.0, 10.0, 1.0, 9.0];
        let v = [0, 0, 1, 1, 0, 1];
        assert_eq!(single_dim_accuracy(&z, &v, 2, &[0, 1, 2, 3], &[4, 5]), 1.0);
        assert_eq!(single_dim_accuracy(&z, &[0, 0, 1, 1, 1, 0], 2, &[0, 1, 2, 3], &[4, 5]), 0.0);
    }
}

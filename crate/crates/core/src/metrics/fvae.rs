use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CodeFactorTable;
use crate::error::{argument, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FvaeScore {
    pub score: f64,
    pub train_accuracy: f64,
    /// Factor predicted for each latent dim by the majority-vote classifier.
    pub assignment: Vec<Option<usize>>,
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Majority-vote score.
///
/// Each vote fixes one factor at a random value, draws `probe` rows (with
/// replacement) sharing that value, and records the dim with the smallest
/// variance after dividing every dim by its global std. `votes` votes fit
/// the classifier and another `votes` fresh votes score it.
pub fn fvae_score(table: &CodeFactorTable, votes: usize, probe: usize, seed: u64) -> Result<FvaeScore> {
    if votes == 0 || probe < 2 {
        return Err(argument("fvae needs at least 1 vote and 2 probe rows"));
    }
    let d = table.latent_dim();
    let codes: Vec<Vec<f64>> = (0..d).map(|j| table.code(j).to_vec()).collect();
    let scale: Vec<f64> = codes.iter().map(|c| std_dev(c)).collect();
    let active: Vec<usize> = (0..d).filter(|&j| scale[j] > 0.0).collect();
    if active.len() < d {
        log::warn!("fvae: {} zero-variance dims excluded", d - active.len());
    }
    let factors: Vec<usize> = (0..table.num_factors()).filter(|&f| table.informative(f)).collect();
    if active.is_empty() || factors.is_empty() {
        log::warn!("fvae: nothing to score");
        return Ok(FvaeScore { score: 0.0, train_accuracy: 0.0, assignment: vec![None; d] });
    }
    // rows grouped by (factor, value)
    let by_value: Vec<Vec<Vec<usize>>> = (0..table.num_factors())
        .map(|f| {
            let mut groups = vec![Vec::new(); table.levels()[f]];
            for (i, &v) in table.factor(f).iter().enumerate() {
                groups[v].push(i);
            }
            groups
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cast = |rng: &mut ChaCha8Rng| -> (usize, usize) {
        let f = factors[rng.random_range(0..factors.len())];
        let rows = &by_value[f][rng.random_range(0..by_value[f].len())];
        let picks: Vec<usize> = (0..probe).map(|_| rows[rng.random_range(0..rows.len())]).collect();
        let mut best = (active[0], f64::INFINITY);
        for &j in &active {
            let vals: Vec<f64> = picks.iter().map(|&i| codes[j][i] / scale[j]).collect();
            let var = std_dev(&vals).powi(2);
            if var < best.1 {
                best = (j, var);
            }
        }
        (best.0, f)
    };
    let ballots: Vec<(usize, usize)> = (0..2 * votes).map(|_| cast(&mut rng)).collect();
    let (train, test) = ballots.split_at(votes);

    let nf = table.num_factors();
    let mut tally = vec![vec![0usize; nf]; d];
    for &(j, f) in train {
        tally[j][f] += 1;
    }
    let assignment: Vec<Option<usize>> = tally
        .iter()
        .map(|row| {
            let (f, &c) = row.iter().enumerate().fold((0, &0), |b, x| if x.1 > b.1 { x } else { b });
            (c > 0).then_some(f)
        })
        .collect();
    let accuracy = |set: &[(usize, usize)]| {
        set.iter().filter(|&&(j, f)| assignment[j] == Some(f)).count() as f64 / set.len() as f64
    };
    Ok(FvaeScore { score: accuracy(test), train_accuracy: accuracy(train), assignment })
}

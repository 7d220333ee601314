use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::factors::{FactorGrid, FactorTuple, Image};
use super::splits::Split;
use crate::error::{argument, Error, Result};

const MAX_REJECTIONS: usize = 10_000;

/// A weakly supervised pair: two images whose factor tuples differ in
/// exactly `k` coordinates. `df` names those coordinates and is kept for
/// tests only; model-facing batches never carry it.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub x_l: Image,
    pub x_m: Image,
    pub k: usize,
    pub df: BTreeSet<usize>,
    pub y_l: usize,
    pub y_m: usize,
    pub v_l: FactorTuple,
    pub v_m: FactorTuple,
}

/// Factors whose value may change within `split`.
pub fn eligible_factors(grid: &FactorGrid, split: &Split, fix_class: bool) -> Vec<usize> {
    let predictive = grid.spec().predictive_index();
    (0..grid.spec().num_factors())
        .filter(|&f| split.values(f).len() >= 2)
        .filter(|&f| !(fix_class && f == predictive))
        .collect()
}

/// Factor tuples for one pair, without rendering.
pub fn sample_pair_tuples<R: Rng>(
    grid: &FactorGrid,
    split: &Split,
    k: usize,
    fix_class: bool,
    rng: &mut R,
) -> Result<(FactorTuple, FactorTuple, BTreeSet<usize>)> {
    let eligible = eligible_factors(grid, split, fix_class);
    if k == 0 || k > eligible.len() {
        return Err(argument(format!(
            "k = {k} outside 1..={} eligible factors",
            eligible.len()
        )));
    }
    for _ in 0..MAX_REJECTIONS {
        let v_l: FactorTuple = split
            .domain
            .iter()
            .map(|vals| vals[rng.random_range(0..vals.len())])
            .collect();
        if !split.contains(&v_l) {
            continue;
        }
        let chosen = sample(rng, eligible.len(), k);
        let mut v_m = v_l.clone();
        let mut df = BTreeSet::new();
        for idx in chosen.iter() {
            let f = eligible[idx];
            let vals = split.values(f);
            // Uniform over the values that differ from the current one.
            let current = vals.iter().position(|&v| v == v_l[f]).expect("value in domain");
            let mut pick = rng.random_range(0..vals.len() - 1);
            if pick >= current {
                pick += 1;
            }
            v_m[f] = vals[pick];
            df.insert(f);
        }
        if split.contains(&v_m) {
            return Ok((v_l, v_m, df));
        }
    }
    Err(Error::Config(
        "split too sparse to draw a pair; lower test_fraction".into(),
    ))
}

/// Draws one pair with exactly `k` differing factors.
pub fn sample_pair<R: Rng>(
    grid: &FactorGrid,
    split: &Split,
    k: usize,
    fix_class: bool,
    rng: &mut R,
) -> Result<PairSample> {
    let (v_l, v_m, df) = sample_pair_tuples(grid, split, k, fix_class, rng)?;
    Ok(PairSample {
        x_l: grid.render(&v_l)?,
        x_m: grid.render(&v_m)?,
        k,
        y_l: grid.label(&v_l),
        y_m: grid.label(&v_m),
        df,
        v_l,
        v_m,
    })
}

/// Seeded convenience wrapper around [`sample_pair`].
pub fn sample_pair_seeded(
    grid: &FactorGrid,
    split: &Split,
    k: usize,
    fix_class: bool,
    seed: u64,
) -> Result<PairSample> {
    sample_pair(grid, split, k, fix_class, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// What the model sees for a batch of pairs: flattened images, labels and
/// the shared change count. Factor identities are deliberately absent.
#[derive(Clone, Debug, Serialize)]
pub struct PairBatch {
    /// `[2P, C*H*W]`: rows `0..P` are the `l` images, `P..2P` their partners.
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl PairBatch {
    pub fn num_pairs(&self) -> usize {
        self.labels.len() / 2
    }

    pub fn from_pairs(pairs: &[PairSample]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| argument("empty pair list"))?;
        let k = first.k;
        if pairs.iter().any(|p| p.k != k) {
            return Err(argument("pairs in one batch must share k"));
        }
        let len = first.x_l.len();
        let p = pairs.len();
        let mut images = Array2::zeros((2 * p, len));
        let mut labels = vec![0; 2 * p];
        for (i, pair) in pairs.iter().enumerate() {
            images
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(pair.x_l.as_slice().expect("standard layout")));
            images
                .row_mut(p + i)
                .assign(&ndarray::ArrayView1::from(pair.x_m.as_slice().expect("standard layout")));
            labels[i] = pair.y_l;
            labels[p + i] = pair.y_m;
        }
        Ok(Self { images, labels, k })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::shapes::{synth_shapes_grid, ShapesConfig, SHAPE};
    use crate::forge::splits::{make_splits, SplitPolicy};

    fn setup() -> (FactorGrid, Split) {
        let grid = synth_shapes_grid(ShapesConfig {
            canvas: 32,
            ..Default::default()
        })
        .unwrap();
        let mut policy = SplitPolicy::default();
        policy.held_out.insert(1, vec![4, 5, 6, 7]);
        let (train, _) = make_splits(&grid, &policy).unwrap();
        (grid, train)
    }

    #[test]
    fn maximal_k_changes_every_eligible_factor() {
        let (grid, train) = setup();
        let p = sample_pair_seeded(&grid, &train, 5, false, 3).unwrap();
        assert_eq!(p.df, (0..5).collect());
        assert!(p.v_l.iter().zip(&p.v_m).all(|(a, b)| a != b));
        let p = sample_pair_seeded(&grid, &train, 4, true, 3).unwrap();
        assert_eq!(p.v_l[SHAPE], p.v_m[SHAPE]);
        assert_eq!(p.y_l, p.y_m);
    }

    #[test]
    fn k_out_of_range_is_argument_error() {
        let (grid, train) = setup();
        assert!(matches!(sample_pair_seeded(&grid, &train, 0, false, 1), Err(Error::Argument(_))));
        assert!(matches!(sample_pair_seeded(&grid, &train, 6, false, 1), Err(Error::Argument(_))));
        assert!(matches!(sample_pair_seeded(&grid, &train, 5, true, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn differing_count_is_exactly_k_and_values_stay_in_split() {
        let (grid, train) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..1000 {
            let k = 1 + trial % 5;
            let (v_l, v_m, df) = sample_pair_tuples(&grid, &train, k, false, &mut rng).unwrap();
            let diff: BTreeSet<usize> = (0..5).filter(|&i| v_l[i] != v_m[i]).collect();
            assert_eq!(diff, df);
            assert_eq!(diff.len(), k);
            assert!(train.contains(&v_l) && train.contains(&v_m));
        }
    }

    #[test]
    fn identical_seed_gives_identical_sequence() {
        let (grid, train) = setup();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_pair_tuples(&grid, &train, 2, false, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn single_factor_selection_is_uniform() {
        // Binomial frequency oracle: each of the 5 eligible factors should be
        // picked with probability 1/5; allow 3 standard deviations.
        let (grid, train) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let (_, _, df) = sample_pair_tuples(&grid, &train, 1, false, &mut rng).unwrap();
            counts[*df.iter().next().unwrap()] += 1;
        }
        let p = 0.2;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn model_batch_does_not_expose_differing_factors() {
        let (grid, train) = setup();
        let pairs: Vec<_> = (0..3)
            .map(|s| sample_pair_seeded(&grid, &train, 2, false, s).unwrap())
            .collect();
        let batch = PairBatch::from_pairs(&pairs).unwrap();
        assert_eq!(batch.images.nrows(), 6);
        assert_eq!(batch.labels[3], pairs[0].y_m);
        let json = serde_json::to_value(&batch).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["images", "k", "labels"]);
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::factors::{cartesian, FactorGrid, FactorTuple};
use crate::error::{config, Result};

/// How a grid is divided into train and test tuples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPolicy {
    /// Factor index to the values reserved for the test split.
    pub held_out: BTreeMap<usize, Vec<usize>>,
    /// Fraction of the remaining combinations assigned to test by a seeded
    /// hash. Zero disables the sample partition.
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Train,
    Test,
}

/// A product domain of allowed values, optionally thinned by a
/// class-stratified hash partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub side: Side,
    pub domain: Vec<Vec<usize>>,
    pub predictive_index: usize,
    partition: Option<(u64, f64)>,
}

impl Split {
    pub fn contains(&self, tuple: &[usize]) -> bool {
        if tuple.len() != self.domain.len() {
            return false;
        }
        if !tuple.iter().zip(&self.domain).all(|(v, d)| d.contains(v)) {
            return false;
        }
        match self.partition {
            None => true,
            Some((seed, fraction)) => {
                let is_test = partition_hash(seed, tuple, self.predictive_index) < fraction;
                is_test == (self.side == Side::Test)
            }
        }
    }

    /// Member tuples in lexicographic order.
    pub fn tuples(&self) -> Vec<FactorTuple> {
        let all = cartesian(&self.domain);
        match self.partition {
            None => all,
            Some(_) => all.into_iter().filter(|t| self.contains(t)).collect(),
        }
    }

    pub fn values(&self, factor: usize) -> &[usize] {
        &self.domain[factor]
    }
}

/// Hash of the tuple with the predictive factor dropped, so every class of a
/// nuisance configuration lands on the same side.
fn partition_hash(seed: u64, tuple: &[usize], predictive: usize) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for (i, &v) in tuple.iter().enumerate() {
        if i == predictive {
            continue;
        }
        h ^= (v as u64).wrapping_add((i as u64) << 32);
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Splits `grid` into train and test according to `policy`.
pub fn make_splits(grid: &FactorGrid, policy: &SplitPolicy) -> Result<(Split, Split)> {
    let spec = grid.spec();
    let predictive = spec.predictive_index();
    let mut train: Vec<Vec<usize>> = spec.cardinalities().into_iter().map(|c| (0..c).collect()).collect();
    let mut test = train.clone();
    for (&factor, values) in &policy.held_out {
        if factor >= spec.num_factors() {
            return Err(config(format!("held-out factor {factor} out of range")));
        }
        if factor == predictive {
            return Err(config("the predictive factor cannot be held out"));
        }
        if values.is_empty() {
            return Err(config(format!(
                "held-out list for factor `{}` is empty",
                spec.factors()[factor].name
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v >= spec.cardinality(factor)) {
            return Err(config(format!("held-out value {v} out of range for factor {factor}")));
        }
        train[factor].retain(|v| !values.contains(v));
        test[factor] = train_complement(spec.cardinality(factor), &train[factor]);
        if train[factor].is_empty() {
            return Err(config(format!(
                "holding out every value of factor `{}` leaves an empty train split",
                spec.factors()[factor].name
            )));
        }
    }
    if !(0.0..1.0).contains(&policy.test_fraction) {
        return Err(config("test_fraction must lie in [0, 1)"));
    }
    let partition = (policy.test_fraction > 0.0).then_some((policy.seed, policy.test_fraction));
    let train = Split {
        side: Side::Train,
        domain: train,
        predictive_index: predictive,
        partition,
    };
    let test = Split {
        side: Side::Test,
        domain: test,
        predictive_index: predictive,
        partition,
    };
    if partition.is_some() {
        if train.tuples().is_empty() {
            return Err(config("train split is empty"));
        }
        if test.tuples().is_empty() {
            return Err(config("test split is empty"));
        }
    }
    Ok((train, test))
}

fn train_complement(cardinality: usize, train: &[usize]) -> Vec<usize> {
    (0..cardinality).filter(|v| !train.contains(v)).collect()
}

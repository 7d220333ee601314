use ndarray::ArrayView1;

use super::{mean_defined, CodeFactorTable};
use crate::error::{argument, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MigScore {
    pub score: f64,
    pub per_factor: Vec<Option<f64>>,
    /// `[d, F]` mutual information in nats.
    pub mutual_info: Vec<Vec<f64>>,
}

/// Equal-occupancy binning. Equal values share the bin of their first rank,
/// so a constant column lands entirely in bin 0.
pub fn discretize(column: ArrayView1<'_, f64>, bins: usize) -> Vec<usize> {
    let n = column.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]));
    let mut out = vec![0; n];
    let mut first = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && column[i] != column[order[rank - 1]] {
            first = rank;
        }
        out[i] = first * bins / n;
    }
    out
}

fn counts(a: &[usize]) -> Vec<f64> {
    let k = a.iter().max().map_or(0, |m| m + 1);
    let mut c = vec![0.0; k];
    for &v in a {
        c[v] += 1.0;
    }
    c
}

/// Plug-in entropy (nats) of a discrete sample.
pub fn entropy(a: &[usize]) -> f64 {
    let n = a.len() as f64;
    counts(a)
        .into_iter()
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) from the joint histogram.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ca = counts(a);
    let cb = counts(b);
    let mut joint = vec![0.0; ca.len() * cb.len()];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * cb.len() + y] += 1.0;
    }
    let mut mi = 0.0;
    for (x, &px) in ca.iter().enumerate() {
        for (y, &py) in cb.iter().enumerate() {
            let c = joint[x * cb.len() + y];
            if c > 0.0 {
                mi += c / n * (c * n / (px * py)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mean over factors of the normalized gap between the two most informative dims.
pub fn mig(table: &CodeFactorTable, bins: usize) -> Result<MigScore> {
    if bins < 2 {
        return Err(argument("mig needs at least 2 bins"));
    }
    let binned: Vec<Vec<usize>> = (0..table.latent_dim()).map(|j| discretize(table.code(j), bins)).collect();
    let mut mutual_info = vec![vec![0.0; table.num_factors()]; table.latent_dim()];
    let mut per_factor = Vec::with_capacity(table.num_factors());
    for f in 0..table.num_factors() {
        let v = table.factor(f);
        let h = entropy(&v);
        if !table.informative(f) || h <= 0.0 {
            per_factor.push(None);
            continue;
        }
        let mut mis: Vec<f64> = binned.iter().map(|z| mutual_information(z, &v)).collect();
        for (j, &m) in mis.iter().enumerate() {
            mutual_info[j][f] = m;
        }
        mis.sort_by(|a, b| b.total_cmp(a));
        let second = mis.get(1).copied().unwrap_or(0.0);
        per_factor.push(Some(((mis[0] - second) / h).clamp(0.0, 1.0)));
    }
    Ok(MigScore { score: mean_defined(&per_factor), per_factor, mutual_info })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn discretize_equal_occupancy() {
        let col = array![5.0, 1.0, 3.0, 2.0];
        assert_eq!(discretize(col.view(), 2), vec![1, 0, 1, 0]);
        let ties = array![1.0, 1.0, 1.0, 2.0];
        assert_eq!(discretize(ties.view(), 4), vec![0, 0, 0, 3]);
    }

    #[test]
    fn entropy_and_mi_small_cases() {
        let a = [0, 0, 1, 1];
        assert!((entropy(&a) - 2f64.ln()).abs() < 1e-15);
        assert!((mutual_information(&a, &a) - 2f64.ln()).abs() < 1e-15);
        assert!(mutual_information(&a, &[0, 1, 0, 1]).abs() < 1e-15);
    }

    #[test]
    fn one_to_one_gives_unit_terms() {
        let factors = random_factors(4000, &[4, 8, 4], 3);
        let t = CodeFactorTable::new(one_to_one(&factors, 0, 0), factors).unwrap();
        let m = mig(&t, 20).unwrap();
        for term in m.per_factor.iter().flatten() {
            assert!(*term > 0.99, "{term}");
        }
    }

    #[test]
    fn constant_codes_score_zero() {
        let factors = random_factors(500, &[3, 3], 4);
        let t = CodeFactorTable::new(Array2::from_elem((500, 3), 0.25), factors).unwrap();
        let m = mig(&t, 20).unwrap();
        assert_eq!(m.score, 0.0);
        assert!(m.mutual_info.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_dim_closes_the_gap() {
        let factors = random_factors(1000, &[5, 3], 5);
        let mut codes = one_to_one(&factors, 1, 6);
        let dup = codes.column(0).to_owned();
        codes.column_mut(2).assign(&dup);
        let t = CodeFactorTable::new(codes, factors).unwrap();
        let m = mig(&t, 20).unwrap();
        assert!(m.per_factor[0].unwrap().abs() < 1e-12);
        assert!(m.per_factor[1].unwrap() > 0.9);
    }

    #[test]
    fn degenerate_factor_skipped() {
        let mut factors = random_factors(300, &[3, 2], 7);
        factors.column_mut(1).fill(4);
        let t = CodeFactorTable::new(one_to_one(&factors, 1, 8), factors).unwrap();
        let m = mig(&t, 10).unwrap();
        assert_eq!(m.per_factor[1], None);
        assert!(m.per_factor[0].is_some());
    }
}

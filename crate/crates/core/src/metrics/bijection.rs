use ndarray::{array, Array2, ArrayView2};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{argument, Result};

/// Inputs are clipped to `(ε, 1 − ε)` before the probit.
pub const BIJECTION_CLIP: f64 = 1e-9;

/// Reflection `I − 2vvᵀ` with `v = (√α, √(1−α))`.
pub fn householder(alpha: f64) -> Array2<f64> {
    let v = [alpha.sqrt(), (1.0 - alpha).sqrt()];
    array![
        [1.0 - 2.0 * v[0] * v[0], -2.0 * v[0] * v[1]],
        [-2.0 * v[1] * v[0], 1.0 - 2.0 * v[1] * v[1]]
    ]
}

/// Marginal-preserving map of independent uniforms that mixes both inputs:
/// probit, rotate by the Householder reflection, normal CDF back.
pub fn entangling_bijection(alpha: f64, samples: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(argument(format!("alpha must lie in (0, 0.5), got {alpha}")));
    }
    if samples.ncols() != 2 {
        return Err(argument(format!("samples must have 2 columns, got {}", samples.ncols())));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(argument("samples contain NaN"));
    }
    let a = householder(alpha);
    let normal = Normal::standard();
    let mut out = Array2::zeros(samples.dim());
    for (i, row) in samples.rows().into_iter().enumerate() {
        let h: Vec<f64> =
            row.iter().map(|&u| normal.inverse_cdf(u.clamp(BIJECTION_CLIP, 1.0 - BIJECTION_CLIP))).collect();
        for r in 0..2 {
            out[[i, r]] = normal.cdf(a[[r, 0]] * h[0] + a[[r, 1]] * h[1]);
        }
    }
    Ok((a, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn householder_is_orthogonal_and_symmetric() {
        for alpha in [0.01, 0.3, 0.49] {
            let a = householder(alpha);
            let ata = a.t().dot(&a);
            for ((i, j), v) in ata.indexed_iter() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((v - target).abs() < 1e-12);
            }
            assert_eq!(a[[0, 1]], a[[1, 0]]);
        }
    }

    #[test]
    fn alpha_out_of_range() {
        let s = Array2::from_elem((2, 2), 0.5);
        for alpha in [0.0, 0.5, -1.0, f64::NAN] {
            assert!(entangling_bijection(alpha, s.view()).is_err());
        }
    }

    #[test]
    fn center_maps_to_center_and_edges_are_clipped() {
        let s = array![[0.5, 0.5], [0.0, 1.0]];
        let (_, f) = entangling_bijection(0.3, s.view()).unwrap();
        assert!((f[[0, 0]] - 0.5).abs() < 1e-15 && (f[[0, 1]] - 0.5).abs() < 1e-15);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn map_is_an_involution() {
        let s = array![[0.2, 0.7], [0.9, 0.1]];
        let (_, once) = entangling_bijection(0.3, s.view()).unwrap();
        let (_, twice) = entangling_bijection(0.3, once.view()).unwrap();
        for (a, b) in s.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

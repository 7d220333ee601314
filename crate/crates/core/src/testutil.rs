//! Shared helpers for unit tests.

use crate::tape::Mat;

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
    let h = 1e-6;
    let mut out = Mat::zeros(x.dim());
    for idx in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        xm.as_slice_mut().unwrap()[idx] -= h;
        out.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` below `tol`.
pub fn assert_grad_close(analytic: &Mat, numeric: &Mat, tol: f64) {
    assert_eq!(analytic.dim(), numeric.dim());
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(numeric.mapv(|v| v * v).sum().sqrt());
    assert!(scale > 0.0, "both gradients vanish");
    assert!(
        diff / scale < tol,
        "relative gradient error {:.3e}\nanalytic {analytic:?}\nnumeric {numeric:?}",
        diff / scale
    );
}

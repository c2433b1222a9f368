//! Shared oracle helpers for integration tests: central finite differences
//! against the reverse-mode tape, and an independent edit-distance DP.

use teal::tensor::Tensor;

/// Central finite difference of `f` with respect to coordinate `idx` of `t`,
/// evaluated at 64-bit precision. `f` must recompute the loss from scratch
/// (it is invoked with the coordinate displaced in both directions).
pub fn central_diff<F: FnMut() -> f64>(t: &Tensor<f64>, idx: usize, mut f: F) -> f64 {
    let w0 = t.data()[idx];
    let h = 1e-6 * w0.abs().max(1.0);
    t.data_mut()[idx] = w0 + h;
    let up = f();
    t.data_mut()[idx] = w0 - h;
    let down = f();
    t.data_mut()[idx] = w0;
    (up - down) / (2.0 * h)
}

/// Relative error between an analytic and a finite-difference gradient.
/// Coordinates where both are below the finite-difference noise floor count
/// as exact agreement (the quotient would be pure rounding noise).
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale.max(1e-4)
    }
}

/// Full-matrix Levenshtein DP, written independently of the library's
/// rolling-row implementation.
pub fn dp_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[n][m]
}

//! Raw numeric kernels shared by forward and backward passes.
//!
//! Everything here is a pure function on slices: no tape, no allocation
//! policy beyond the output buffer the caller hands in. The matmul uses the
//! i-k-j loop order so the inner loop walks both the output row and a B row
//! contiguously (autovectorizes without reassociation), and parallelizes
//! over disjoint row chunks, which keeps results bitwise identical for any
//! thread count.

use crate::num::{for_row_chunks, Scalar};

/// `out[m×n] = a[m×k] · b[k×n]`. `out` is overwritten.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for_row_chunks(out, m, n, |rows, chunk| {
        for (ci, i) in rows.enumerate() {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut chunk[ci * n..(ci + 1) * n];
            out_row.fill(S::zero());
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
    });
}

/// Like [`matmul`] but accumulates into `out` instead of overwriting.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for_row_chunks(out, m, n, |rows, chunk| {
        for (ci, i) in rows.enumerate() {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut chunk[ci * n..(ci + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
    });
}

/// `out[n×m] = a[m×n]ᵀ`.
pub fn transpose<S: Scalar>(a: &[S], m: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Numerically stable softmax of one contiguous lane, written into `out`.
pub fn softmax_lane<S: Scalar>(lane: &[S], out: &mut [S]) {
    let mut mx = S::neg_infinity();
    for &v in lane {
        if v > mx {
            mx = v;
        }
    }
    // All -inf (fully masked) would divide by zero; callers never build such
    // lanes, but keep the guard cheap and explicit.
    if mx == S::neg_infinity() {
        let u = S::one() / S::of_f64(lane.len() as f64);
        out.fill(u);
        return;
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(lane) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// log(Σ exp(lane)) with max-shift.
pub fn log_sum_exp<S: Scalar>(lane: &[S]) -> S {
    let mut mx = S::neg_infinity();
    for &v in lane {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = S::zero();
    for &v in lane {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

/// Squared Euclidean distance.
pub fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest row of `table` (rows of length `dim`) to `probe`,
/// ties broken toward the lowest index.
pub fn nearest_row<S: Scalar>(table: &[S], dim: usize, probe: &[S]) -> usize {
    debug_assert_eq!(probe.len(), dim);
    debug_assert!(!table.is_empty() && table.len() % dim == 0);
    let mut best = 0usize;
    let mut best_d = S::infinity();
    for (j, row) in table.chunks_exact(dim).enumerate() {
        let d = sq_dist(row, probe);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

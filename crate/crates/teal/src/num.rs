//! Scalar abstraction and kernel threading knobs.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run in
//! f32 (production) and f64 (shadow mode for finite-difference gradient
//! checks). Concrete aliases live at the crate root.

use std::sync::OnceLock;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::iter::Sum<Self>
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }
    fn of_f32(v: f32) -> Self {
        Self::from_f32(v).expect("finite f32 converts to scalar")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Number of threads row-parallel kernels may use.
///
/// Read once per process from `TEAL_THREADS`; defaults to 1 so repeated runs
/// are bit-reproducible out of the box. Row partitions write disjoint output
/// slices, so results are bitwise identical for any fixed value.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("TEAL_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Run `f(chunk_index, row_range)` over `rows` split into at most
/// [`kernel_threads`] contiguous chunks, each given a disjoint `&mut` window
/// of `out` (`row_width` values per row).
pub fn for_row_chunks<S: Send, F>(out: &mut [S], rows: usize, row_width: usize, f: F)
where
    F: Fn(std::ops::Range<usize>, &mut [S]) + Sync,
{
    assert_eq!(out.len(), rows * row_width, "output buffer size");
    let threads = kernel_threads().min(rows.max(1));
    if threads <= 1 {
        f(0..rows, out);
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut row0 = 0usize;
        while row0 < rows {
            let take = per.min(rows - row0);
            let (chunk, tail) = rest.split_at_mut(take * row_width);
            rest = tail;
            let range = row0..row0 + take;
            let f = &f;
            scope.spawn(move || f(range, chunk));
            row0 += take;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_conversions_round_trip() {
        assert_eq!(f32::of_f64(0.5).as_f64(), 0.5);
        assert_eq!(f64::of_f32(2.0), 2.0f64);
    }

    #[test]
    fn row_chunks_cover_everything_once() {
        let rows = 7;
        let width = 3;
        let mut out = vec![0u32; rows * width];
        for_row_chunks(&mut out, rows, width, |range, chunk| {
            for (i, r) in range.clone().enumerate() {
                for c in 0..width {
                    chunk[i * width + c] = (r * width + c) as u32;
                }
            }
        });
        let want: Vec<u32> = (0..(rows * width) as u32).collect();
        assert_eq!(out, want);
    }
}

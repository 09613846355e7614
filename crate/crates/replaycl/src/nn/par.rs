//! Deterministic chunked parallelism.
//!
//! Work is split into fixed-size chunks and results are combined in chunk
//! order, so the floating-point result is bit-identical whether the
//! `parallel` feature (rayon) is enabled or not, and independent of the
//! thread count.

/// Fixed chunk width for gradient accumulation and batch evaluation.
pub const CHUNK: usize = 16;

#[cfg(feature = "parallel")]
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync,
{
    use rayon::prelude::*;
    items.par_chunks(chunk).map(&f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync,
{
    items.chunks(chunk).map(|c| f(c)).collect()
}

/// Ordered in-place accumulation of flat float vectors.
pub fn sum_into<S: super::Scalar>(acc: &mut [S], part: &[S]) {
    debug_assert_eq!(acc.len(), part.len());
    for (a, p) in acc.iter_mut().zip(part) {
        *a += *p;
    }
}

//! Thin switch between rayon and sequential iteration.
//!
//! Every parallel loop in the crate maps independent items to owned results
//! and reduces them afterwards in index order, so the output never depends on
//! the thread count.

#[cfg(feature = "parallel")]
pub(crate) fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Number of items processed between ordered reductions. Fixed, so the
/// summation tree is the same for any thread pool size.
pub(crate) const CHUNK: usize = 8;

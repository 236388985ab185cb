//! Fixed-chunk parallel reductions.
//!
//! Chunk boundaries do not depend on the thread count and partial results
//! are merged left to right, so floating-point sums are bit-reproducible.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 4096;

/// Fold each `CHUNK`-sized slice of `items` (with its starting offset) into
/// a partial accumulator, then merge the partials in order.
pub(crate) fn chunked_reduce<T, A, F, M>(items: &[T], stride: usize, fold: F, mut merge: M) -> A
where
    T: Sync,
    A: Send + Default,
    F: Fn(&[T], usize) -> A + Sync,
    M: FnMut(&mut A, A),
{
    let chunk = CHUNK * stride.max(1);
    let partials: Vec<A> = items
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, c)| fold(c, i * CHUNK))
        .collect();
    let mut acc = A::default();
    for p in partials {
        merge(&mut acc, p);
    }
    acc
}

//! Deterministic replication scheduling.
//!
//! Monte Carlo loops fold replications into an accumulator in fixed-size
//! chunks. Chunks may be processed by any number of workers, but each chunk is
//! folded serially in index order and chunk results are merged in chunk order,
//! so floating-point sums are bit-identical for every worker count.

use alloc::vec::Vec;

/// Replications per chunk. Fixed so the summation tree never depends on the
/// worker count.
const CHUNK: u64 = 1024;

/// Folds `0..reps` into accumulators chunk by chunk and merges the chunk
/// accumulators in index order.
pub(crate) fn fold_reps<A, I, F, M>(reps: u64, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Send + Sync,
    F: Fn(&mut A, u64) + Send + Sync,
    M: Fn(&mut A, A),
{
    let chunks = fold_chunks(reps, &init, &fold);
    let mut out = init();
    for c in chunks {
        merge(&mut out, c);
    }
    out
}

#[cfg(feature = "parallel")]
fn fold_chunks<A, I, F>(reps: u64, init: &I, fold: &F) -> Vec<A>
where
    A: Send,
    I: Fn() -> A + Send + Sync,
    F: Fn(&mut A, u64) + Send + Sync,
{
    use rayon::prelude::*;
    let n_chunks = reps.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| fold_one_chunk(c, reps, init, fold))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn fold_chunks<A, I, F>(reps: u64, init: &I, fold: &F) -> Vec<A>
where
    A: Send,
    I: Fn() -> A + Send + Sync,
    F: Fn(&mut A, u64) + Send + Sync,
{
    let n_chunks = reps.div_ceil(CHUNK);
    (0..n_chunks).map(|c| fold_one_chunk(c, reps, init, fold)).collect()
}

fn fold_one_chunk<A, I, F>(chunk: u64, reps: u64, init: &I, fold: &F) -> A
where
    I: Fn() -> A,
    F: Fn(&mut A, u64),
{
    let lo = chunk * CHUNK;
    let hi = (lo + CHUNK).min(reps);
    let mut acc = init();
    for r in lo..hi {
        fold(&mut acc, r);
    }
    acc
}

/// Evaluates `f` at every index in `0..n` and returns the results in index
/// order. Used for node-indexed grids where each evaluation is independent.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

//! Execution mode switch shared by the data-parallel kernels.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it, or when [`Exec::Sequential`] is requested, the same chunked
//! loops run on the calling thread. Both paths produce identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be distributed across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Number of worker threads the parallel path can use.
pub fn num_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f` over matching chunks of `input` and `output`, collecting one
/// result per chunk in chunk order.
///
/// `in_chunk` and `out_chunk` must split the slices into the same number of
/// pieces; the chunk index is passed along.
pub fn zip_chunks<A, B, R, F>(
    exec: Exec,
    input: &[A],
    in_chunk: usize,
    output: &mut [B],
    out_chunk: usize,
    f: F,
) -> Vec<R>
where
    A: Sync,
    B: Send,
    R: Send,
    F: Fn(usize, &[A], &mut [B]) -> R + Sync + Send,
{
    debug_assert_eq!(
        input.len().div_ceil(in_chunk.max(1)),
        output.len().div_ceil(out_chunk.max(1))
    );
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return input
            .par_chunks(in_chunk)
            .zip(output.par_chunks_mut(out_chunk))
            .enumerate()
            .map(|(i, (a, b))| f(i, a, b))
            .collect();
    }
    let _ = exec;
    input
        .chunks(in_chunk)
        .zip(output.chunks_mut(out_chunk))
        .enumerate()
        .map(|(i, (a, b))| f(i, a, b))
        .collect()
}

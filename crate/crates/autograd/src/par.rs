//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon. Without it
//! every helper runs on the calling thread, in order. Callers pass a rough
//! per-item cost so tiny workloads skip the fork/join overhead entirely.

/// Minimum estimated flop count before a kernel fans out to the pool.
pub const PAR_MIN_WORK: usize = 1 << 14;

/// Whether this build dispatches to a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Apply `f` to consecutive `chunk`-sized pieces of `data`.
///
/// `f` receives the chunk index and the chunk. `work_per_chunk` is the
/// caller's estimate of flops per chunk.
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let n_chunks = data.len().div_ceil(chunk);
        if n_chunks > 1 && n_chunks.saturating_mul(work_per_chunk) >= PAR_MIN_WORK {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_chunk;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `0..n` through `f`, preserving order.
pub fn map_range<R, F>(n: usize, work_per_item: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 && n.saturating_mul(work_per_item) >= PAR_MIN_WORK {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}

/// Map every item of a slice through `f`, preserving order. Always fans out
/// when parallel; intended for coarse items (images, seeds, batch entries).
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Run `f` with the pool restricted to one worker. Used by benches to compare
/// against the default pool inside a single build.
pub fn with_single_thread<R: Send, F: FnOnce() -> R + Send>(f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

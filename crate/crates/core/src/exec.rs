//! Batch-level execution.
//!
//! Every embarrassingly parallel loop in the crate (per-sample gradients,
//! dataset generation, Monte Carlo trials) goes through [`map_range`]. With
//! the `parallel` feature it fans out over the rayon pool, otherwise it runs
//! in order on the calling thread. Results are always returned in index
//! order, so reductions over them are deterministic either way.

/// Evaluate `f(i)` for `i in 0..n` and collect the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        parallel::map_range(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sequential::map_range(n, f)
    }
}

/// Number of workers `map_range` will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

pub mod sequential {
    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }
}

#[cfg(feature = "parallel")]
pub mod parallel {
    use rayon::prelude::*;

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }

    /// Install a global pool capped at `threads` workers. Only the first call
    /// in a process has an effect.
    pub fn init_pool(threads: usize) -> bool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
}

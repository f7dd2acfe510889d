//! Data-parallel helpers for the embarrassingly parallel paths: dataset
//! generation, per-image evaluation, and ablation sweeps. The training step
//! itself is strictly sequential.
//!
//! With the `parallel` feature (default) these fan out over a rayon pool
//! capped by the `ADAPTER_SEG_THREADS` env var; without it they degrade to
//! plain sequential iteration. Every consumer merges results in input
//! order, so outputs are identical either way.

#[cfg(feature = "parallel")]
mod pool {
    use std::sync::OnceLock;

    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

    pub fn get() -> &'static rayon::ThreadPool {
        POOL.get_or_init(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(super::effective_threads())
                .build()
                .expect("failed to build thread pool")
        })
    }
}

/// Thread budget: ADAPTER_SEG_THREADS when set, else the machine's
/// available parallelism. Always 1 without the `parallel` feature.
pub fn effective_threads() -> usize {
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
    #[cfg(feature = "parallel")]
    {
        std::env::var("ADAPTER_SEG_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    }
}

/// Maps `f` over `items`, in parallel when the feature allows. Results
/// come back in input order.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    pool::get().install(|| items.par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Always-sequential map; the criterion benches compare this baseline
/// against `par_map`.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs `f` over the index range on a dedicated pool of `threads` workers
/// (the `--parallel K` ablation mode). Results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<R: Send, F>(count: usize, threads: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if threads <= 1 {
        return (0..count).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build sweep pool");
    pool.install(|| (0..count).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<R, F>(count: usize, _threads: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..count).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<u64> = (0..64).collect();
        let out = par_map(&items, |&x| x * x);
        let expect = seq_map(&items, |&x| x * x);
        assert_eq!(out, expect);
    }

    #[test]
    fn indexed_map_matches_sequential() {
        let out = par_map_indexed(10, 4, |i| i as u64 + 1);
        assert_eq!(out, (1..=10).collect::<Vec<u64>>());
    }
}

//! Data-parallel map over independent work items, with a sequential fallback
//! when the `parallel` feature is disabled.
//!
//! Results always come back in input order, so callers are deterministic
//! regardless of which path runs.

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Set the worker-pool size for the parallel path. Must be called before the
/// first parallel map; later calls are ignored (the global pool is built
/// once). A no-op without the `parallel` feature.
#[cfg(feature = "parallel")]
pub fn configure_workers(n: usize) {
    if n >= 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Set the worker-pool size for the parallel path (no-op: sequential build).
#[cfg(not(feature = "parallel"))]
pub fn configure_workers(_n: usize) {}

/// Always-sequential variant, kept available so benchmarks can compare the
/// two dispatch paths in a single build.
pub fn map_sequential<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

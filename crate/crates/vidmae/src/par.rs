//! Data-parallel helpers. With the `parallel` feature (default) the mapped
//! closures run on the rayon pool; results are collected in input order and
//! reduced sequentially, so outputs are identical to the sequential fallback.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving parallel map.
#[cfg(feature = "parallel")]
pub fn parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential map; benchmarks compare this against [`parallel_map`].
pub fn sequential_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

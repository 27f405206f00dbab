//! Optional data parallelism for pure per-item work.
//!
//! Thread count comes from the `PGAP_THREADS` environment variable and
//! defaults to 1 (fully sequential). Only order-preserving maps over
//! independent items go through here, so results are identical at any
//! thread count.

use rayon::prelude::*;

pub const THREADS_ENV: &str = "PGAP_THREADS";

/// Configured worker count: `PGAP_THREADS` if set to a positive integer,
/// otherwise 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Order-preserving map, parallel only when more than one thread is
/// configured.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let threads = thread_count();
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build();
    match pool {
        Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
        // fall back to sequential if the pool cannot be built
        Err(_) => items.iter().map(f).collect(),
    }
}

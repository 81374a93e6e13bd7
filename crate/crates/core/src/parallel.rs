//! Order-preserving parallel map over a bounded worker pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Applies `f` to every item using at most `threads` workers. Results come
/// back in input order; with `threads == 1` everything runs on the caller's
/// thread.
pub fn parallel_map<T, R, F>(threads: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if threads == 0 {
        return Err(Error::invalid("thread count must be positive"));
    }
    if threads == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

//! Bounded-parallel map used by the per-record pipeline stages.

use rayon::prelude::*;

/// Apply `f` to every item on at most `threads` workers. Output order
/// matches input order.
pub fn bounded_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

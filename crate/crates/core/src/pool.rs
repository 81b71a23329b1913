//! Bounded worker pool whose results come back in input order.

use rayon::prelude::*;

/// Applies `job` to every item on at most `parallelism` threads and returns
/// the results in the order of `items`.
pub fn run_ordered<T, R, F>(parallelism: usize, items: &[T], job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let threads = parallelism.max(1);
    if threads == 1 {
        return items.iter().map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("worker pool");
    pool.install(|| items.par_iter().map(&job).collect())
}

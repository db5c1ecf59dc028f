use rayon::prelude::*;
use rayon::ThreadPool;

/// Evaluates `f(0), .., f(n - 1)` on the pool (or inline without one) and
/// returns the results in index order. Each task sees only its own index, so
/// results do not depend on scheduling.
pub(crate) fn map_indexed<T, F>(pool: Option<&ThreadPool>, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(pool) if pool.current_num_threads() > 1 => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).map(f).collect(),
    }
}

//! Episode-level data parallelism with a sequential fallback.
//!
//! Heavy loops in this crate (batch gradient computation, evaluation over an
//! episode set, seed sweeps) are embarrassingly parallel across episodes.
//! With the `parallel` feature (default) they run on the rayon pool; without
//! it the same call sites compile to a plain sequential map. Results are
//! always collected **in input order** and reduced sequentially, so outputs
//! are byte-identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the result.
///
/// Runs on the rayon pool when the `parallel` feature is enabled, otherwise
/// sequentially. `f` must be deterministic for outputs to be reproducible;
/// everything in this crate derives per-item RNG streams from stable seeds
/// for exactly that reason.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant, kept callable regardless of features so the
/// bench suite can compare both execution paths in a single build.
pub fn sequential_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Cap the rayon worker count (the CLI `--jobs` flag). Returns false when the
/// pool was already initialized or the sequential build is active.
#[cfg(feature = "parallel")]
pub fn configure_jobs(jobs: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_jobs(_jobs: usize) -> bool {
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_input_order() {
        let items: Vec<u64> = (0..257).collect();
        let out = ordered_map(&items, |x| x * 3);
        let seq = sequential_map(&items, |x| x * 3);
        assert_eq!(out, seq);
        assert_eq!(out[200], 600);
    }
}

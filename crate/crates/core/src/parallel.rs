//! Execution policy for the crate's data-parallel loops.
//!
//! Every parallel map preserves input order and every reduction is done
//! sequentially over chunk results in chunk order, so a `Sequential` and a
//! `Parallel` run produce bit-identical output.

use std::sync::Once;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// Whether this policy actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(policy: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = policy;
    items.iter().map(f).collect()
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(policy: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Ordered map over fixed-size chunks of a slice. The last chunk may be short.
pub fn map_chunks<T, R, F>(policy: Parallelism, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if policy.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    let _ = policy;
    items.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

static INIT_POOL: Once = Once::new();

/// Caps the global worker pool. Only the first call has an effect; a
/// value of 0 leaves the default pool size.
pub fn init_thread_pool(threads: usize) {
    INIT_POOL.call_once(|| {
        #[cfg(feature = "parallel")]
        if threads > 0 {
            // Fails only if the global pool was already built elsewhere.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
        let _ = threads;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_under_both_policies() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map(Parallelism::Sequential, &xs, |x| x * x);
        let par = map(Parallelism::Parallel, &xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
    }

    #[test]
    fn chunk_results_come_back_in_chunk_order() {
        let xs: Vec<f64> = (0..103).map(|i| i as f64 * 0.1).collect();
        let seq = map_chunks(Parallelism::Sequential, &xs, 10, |i, c| (i, c.iter().sum::<f64>()));
        let par = map_chunks(Parallelism::Parallel, &xs, 10, |i, c| (i, c.iter().sum::<f64>()));
        assert_eq!(seq.len(), 11);
        assert_eq!(seq, par);
        assert!(seq.iter().enumerate().all(|(i, (j, _))| i == *j));
    }
}

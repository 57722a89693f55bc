//! Order-preserving data parallelism helpers.
//!
//! Hot loops (frame encoding, per-example batch gradients, corpus scoring,
//! chunk captioning) map independent items and reduce sequentially in index
//! order, so results are bit-identical whether the map ran on the rayon
//! pool or inline. The `parallel` feature selects the pool at compile time;
//! [`force_sequential`] overrides it at runtime so the bench suite can
//! compare both paths in one binary.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is enabled.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// True when maps will actually run on the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Map `f` over `items`, preserving input order in the output.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(f).collect()
}

/// Map `f` over the index range `0..n`, preserving index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let doubled = map(&items, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let items: Vec<f64> = (0..500).map(|i| i as f64 * 0.37).collect();
        let par = map(&items, |x| x.sin() * x.cos());
        force_sequential(true);
        let seq = map(&items, |x| x.sin() * x.cos());
        force_sequential(false);
        assert_eq!(par, seq);
    }
}

//! Data-parallel dispatch with a sequential fallback.
//!
//! With the `parallel` feature, work is fanned out over the rayon global pool
//! unless [`set_parallel`] has switched it off at runtime (deterministic-mode
//! runs and benchmarks do this). Without the feature every helper is a plain
//! loop. Callers only ever combine per-index results in index order, so both
//! paths produce identical bits.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enable or disable parallel dispatch. A no-op request for parallelism when
/// the crate was built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

/// `(0..n).map(f).collect()`, possibly in parallel, always in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Elementwise map over large buffers; small ones stay on the calling thread.
pub fn map_slice(src: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    const GRAIN: usize = 1 << 14;
    let mut out = vec![0.0; src.len()];
    for_each_chunk_mut(&mut out, GRAIN, |i, chunk| {
        let base = i * GRAIN;
        for (o, s) in chunk.iter_mut().zip(&src[base..]) {
            *o = f(*s);
        }
    });
    out
}

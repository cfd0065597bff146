//! Data-parallel map helpers with a sequential fallback.
//!
//! Every parallel loop in the crate funnels through [`map_slice`] so results
//! are always assembled in input order, keeping outputs identical between the
//! parallel and sequential paths. Building with `--no-default-features`
//! removes the rayon dependency entirely and forces the sequential path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for data-parallel inner loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Use the rayon thread pool (falls back to sequential when the crate is
    /// built without the `parallel` feature).
    Parallel,
    /// Plain in-order iteration on the calling thread.
    Sequential,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Caps the global worker pool at `n` threads. No-op when the crate is built
/// without the `parallel` feature or once a pool already exists.
pub fn set_thread_cap(n: usize) {
    #[cfg(feature = "parallel")]
    if n >= 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Maps `f` over `items`, returning results in input order.
pub fn map_slice<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => items.iter().map(f).collect(),
        ExecMode::Sequential => items.iter().map(f).collect(),
    }
}

/// Maps `f` over an index range, returning results in index order.
pub fn map_range<R, F>(mode: ExecMode, range: std::ops::Range<usize>, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => range.into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => range.map(f).collect(),
        ExecMode::Sequential => range.map(f).collect(),
    }
}

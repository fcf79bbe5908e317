//! Data-parallel map with a sequential fallback.
//!
//! The parallel path requires the `parallel` feature (on by default). Both
//! paths produce results in index order, and every task owns its inputs, so
//! output is bit-identical between modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for batch work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Serial,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Serial
    }
}

/// Apply `f` to 0..n, collecting results in index order.
pub fn map_indexed<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        ExecMode::Serial => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

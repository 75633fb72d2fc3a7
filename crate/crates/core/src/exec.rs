//! Per-sample work distribution.
//!
//! Implementations may run closures on any number of threads but must return
//! results in index order, so that every reduction done afterwards by the
//! caller has a single fixed summation order.

use alloc::vec::Vec;

pub trait BatchExecutor: Sync {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl BatchExecutor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

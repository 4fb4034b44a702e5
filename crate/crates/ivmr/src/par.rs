//! Thin indirection over rayon so every data-parallel loop in the crate has
//! a sequential fallback when the `parallel` feature is disabled.
//!
//! Results are always collected in index order and reduced sequentially by
//! the caller, so outputs do not depend on thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}


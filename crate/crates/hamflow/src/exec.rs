//! Chunked batch execution.
//!
//! Batch operations split their sample axis into fixed-size chunks, process
//! each chunk independently, and reduce the per-chunk results in chunk-index
//! order. The decomposition depends only on the batch size — never on the
//! number of worker threads — so outputs are bit-identical between the
//! `parallel` build (rayon) and the sequential fallback, and across machines
//! with different core counts.

use crate::error::Result;
use std::ops::Range;

/// Samples per chunk. Fixed: changing this reorders floating-point
/// reductions and breaks bit-for-bit reproducibility of saved artifacts.
pub const CHUNK: usize = 32;

/// The fixed decomposition of `0..n` into `CHUNK`-sized ranges (last one
/// possibly short). `n = 0` yields no ranges.
pub fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(|start| start..(start + CHUNK).min(n))
        .collect()
}

/// Map `f` over the fixed chunk decomposition of `0..n`, in parallel when the
/// `parallel` feature is on. Results come back in chunk order.
pub fn map_chunks<U, F>(n: usize, f: F) -> Result<Vec<U>>
where
    U: Send,
    F: Fn(Range<usize>) -> Result<U> + Sync + Send,
{
    let ranges = chunk_ranges(n);

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Map over an arbitrary list of independent work items (projection indices,
/// sweep legs), preserving item order in the output.
pub fn map_items<T, U, F>(items: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

//! Thin dispatch between serial and rayon-parallel loops.
//!
//! Every parallel site hands each worker a disjoint output chunk, so results
//! are bitwise identical at any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this element count the rayon dispatch overhead outweighs the work.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 32_768;

/// Run `f(chunk_index, chunk)` over equally sized mutable chunks. Small
/// workloads stay on the calling thread.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PARALLEL_THRESHOLD && data.len() >= 2 * chunk {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

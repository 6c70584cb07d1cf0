//! Kernel-level parallelism.
//!
//! `SDHSI_THREADS` caps the number of worker lanes; `0` (or `1`) selects the
//! single-lane mode. Work is always split into fixed-size chunks and partial
//! results are reduced in chunk order, so outputs are bit-identical whatever
//! the lane count.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

/// Samples per reduction chunk in batched kernels.
pub(crate) const SAMPLE_CHUNK: usize = 8;

fn pool() -> Option<&'static ThreadPool> {
    static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let lanes = lanes();
        if lanes <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(lanes)
            .thread_name(|i| format!("sdhsi-kernel-{i}"))
            .build()
            .ok()
    })
    .as_ref()
}

/// Number of kernel lanes in use, as configured by `SDHSI_THREADS`.
pub fn lanes() -> usize {
    static LANES: OnceLock<usize> = OnceLock::new();
    *LANES.get_or_init(|| match std::env::var("SDHSI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => 1,
            Ok(n) => n,
            Err(_) => {
                log::warn!("ignoring unparsable SDHSI_THREADS={v:?}");
                default_lanes()
            }
        },
        Err(_) => default_lanes(),
    })
}

fn default_lanes() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match pool() {
        Some(pool) => pool.install(|| {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        }),
        None => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Maps `f` over `0..count` and returns the results in index order.
pub(crate) fn map_indexed<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match pool() {
        Some(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
        None => (0..count).map(f).collect(),
    }
}

//! Shared thread pool for the hot numeric kernels.
//!
//! Parallelism is always per output element (each element is written by
//! exactly one task with a fixed inner summation order), so results are
//! bitwise identical regardless of thread count. `VTADL_THREADS` caps the
//! pool size; the default is all cores.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var("VTADL_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(num_threads_default);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build thread pool")
    })
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Work sizes below this run sequentially; the pool dispatch overhead is
/// larger than the work itself.
pub const PAR_THRESHOLD: usize = 16 * 1024;

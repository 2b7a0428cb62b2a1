//! Shared worker pool. `OPENDET_THREADS` caps the worker count; the default
//! is the machine's available parallelism. Every parallel region in the crate
//! goes through this pool so thread count never changes numeric results, only
//! wall-clock.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let n = std::env::var("OPENDET_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
    })
}

pub fn workers() -> usize {
    pool().current_num_threads()
}

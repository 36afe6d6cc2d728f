//! Thread-pool control for the data-parallel kernels.
//!
//! The matrix-product kernels in [`crate::tensor`] go parallel through
//! rayon's global pool when the `parallel` feature is enabled. Timing-
//! sensitive callers (the scaling benchmark) instead run inside a dedicated
//! one-worker pool so wall-clock measurements are not distorted by
//! scheduling. Without the feature both helpers degrade to plain calls.

/// Run `f` with all kernel parallelism pinned to a single worker.
#[cfg(feature = "parallel")]
pub fn run_single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn run_single_threaded<T>(f: impl FnOnce() -> T) -> T {
    f()
}

/// Run `f` in a pool of the given width (used by the bench suite to compare
/// parallel and sequential execution of the same kernel).
#[cfg(feature = "parallel")]
pub fn run_with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn run_with_threads<T>(_threads: usize, f: impl FnOnce() -> T) -> T {
    f()
}

/// Whether the parallel kernels are compiled in.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

pub mod error;
pub mod tensorkit;
pub use error::{Error, Result};
pub mod data;
pub mod evalsuite;
pub mod format;
pub mod gmr;
pub mod trainer;
pub mod vit;

/// Worker-thread cap from `EQUIPATCH_THREADS`; `Some(0)` means run serially.
pub fn thread_limit() -> Option<usize> {
    std::env::var("EQUIPATCH_THREADS").ok()?.trim().parse().ok()
}

/// Map over `items` on the worker pool, preserving input order in the result.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if thread_limit() != Some(0) {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Size the global worker pool from `EQUIPATCH_THREADS` (unset: one per core).
/// Call once, before any parallel work.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    if let Some(n) = thread_limit().filter(|&n| n > 0) {
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

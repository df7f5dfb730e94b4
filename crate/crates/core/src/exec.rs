//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over rayon pools;
//! without it every helper runs sequentially on the calling thread. Callers
//! pick a mode at runtime so both paths can be compared side by side.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// The mode actually used after accounting for the compiled features.
    pub fn effective(self) -> ExecMode {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Map `f` over `items` with at most `width` items being processed at once.
///
/// Meant for blocking, I/O-bound work (network calls): a dedicated pool of
/// `width` threads is used so the global rayon pool is never starved.
pub fn map_bounded<T, R, F>(mode: ExecMode, width: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            let width = width.max(1).min(items.len().max(1));
            match (width > 1).then(|| pool::get(width)).flatten() {
                Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
                None => items.iter().map(f).collect(),
            }
        }
        _ => {
            let _ = width;
            items.iter().map(f).collect()
        }
    }
}

#[cfg(feature = "parallel")]
mod pool {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};

    use rayon::ThreadPool;

    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();

    /// Pools are cached per width; batches are issued many times per run.
    pub(super) fn get(width: usize) -> Option<Arc<ThreadPool>> {
        let pools = POOLS.get_or_init(Default::default);
        let mut guard = pools.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(p) = guard.get(&width) {
            return Some(p.clone());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(width)
            .thread_name(move |i| format!("batch-{width}-{i}"))
            .build()
            .map_err(|e| log::warn!("falling back to sequential batch: {e}"))
            .ok()?;
        let pool = Arc::new(pool);
        guard.insert(width, pool.clone());
        Some(pool)
    }
}

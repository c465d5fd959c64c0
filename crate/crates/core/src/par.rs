//! Index-ordered fan-out over independent jobs.
//!
//! Results are always returned in index order, so output never depends on
//! scheduling or on the number of workers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Run on the calling thread.
    Sequential,
    /// Run on a rayon pool; `workers = 0` uses the global pool.
    #[default]
    Parallel,
}

impl Execution {
    pub fn from_workers(workers: usize, deterministic: bool) -> Self {
        if deterministic || workers == 1 {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

/// Configures the global pool size once; later calls are ignored.
pub fn init_workers(workers: usize) {
    #[cfg(feature = "parallel")]
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
}

pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_indexed`] but stops at the first error in index order.
pub fn try_map_indexed<T, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}

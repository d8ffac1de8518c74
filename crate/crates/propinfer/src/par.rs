use propinfer_core::exec::Executor;
use rayon::prelude::*;

/// Runs jobs on a rayon pool. Results come back in index order, so output
/// never depends on scheduling.
#[derive(Debug, Default)]
pub struct Parallel {
    pool: Option<rayon::ThreadPool>,
}

impl Parallel {
    /// Uses the global rayon pool.
    pub fn new() -> Parallel {
        Parallel { pool: None }
    }

    /// Dedicated pool of `threads` workers.
    pub fn with_threads(threads: usize) -> Parallel {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok();
        Parallel { pool }
    }
}

impl Executor for Parallel {
    fn run<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let go = || (0..n).into_par_iter().map(&job).collect();
        match &self.pool {
            Some(pool) => pool.install(go),
            None => go(),
        }
    }
}

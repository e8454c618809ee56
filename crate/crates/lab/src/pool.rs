//! Worker pool for independent sweep cells.

use anyhow::{Context, Result};
use rayon::prelude::*;

pub const WORKERS_VAR: &str = "ICQ_WORKERS";

/// Worker count from `ICQ_WORKERS`, else the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_VAR) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{}={:?} is not a count", WORKERS_VAR, v))?;
            anyhow::ensure!(n >= 1, "{} must be at least 1", WORKERS_VAR);
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Run `f` over `jobs` on `workers` threads. Results come back in job
/// order regardless of scheduling; the first error wins.
pub fn run_ordered<J, T, F>(jobs: Vec<J>, workers: usize, f: F) -> Result<Vec<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    pool.install(|| jobs.into_par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_worker_count() {
        let jobs: Vec<u64> = (0..64).collect();
        let f = |j: u64| -> Result<u64> {
            std::thread::sleep(std::time::Duration::from_micros((64 - j) * 10));
            Ok(j * j)
        };
        let one = run_ordered(jobs.clone(), 1, f).unwrap();
        let many = run_ordered(jobs, 4, f).unwrap();
        assert_eq!(one, many);
        assert_eq!(one[7], 49);
    }

    #[test]
    fn errors_propagate() {
        let r = run_ordered(vec![1, 2, 3], 2, |j: i32| if j == 2 { anyhow::bail!("boom") } else { Ok(j) });
        assert!(r.is_err());
    }
}

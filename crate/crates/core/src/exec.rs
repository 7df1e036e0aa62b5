//! Data-parallel helpers with a sequential fallback.
//!
//! Every batch loop in the crate (episodes, Monte-Carlo queries, gradient
//! chunks) goes through [`Exec`]. Results always come back in input order and
//! reductions are performed sequentially over fixed-size chunks, so the
//! sequential and parallel paths produce bit-identical output. Without the
//! `parallel` feature, [`Exec::Parallel`] runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this build can actually run work in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps fixed chunks of `items` and folds the chunk results in order.
    pub fn chunked_reduce<T, A, M, R>(
        self,
        items: &[T],
        chunk: usize,
        map: M,
        init: A,
        reduce: R,
    ) -> A
    where
        T: Sync,
        A: Send,
        M: Fn(&[T]) -> A + Sync + Send,
        R: FnMut(A, A) -> A,
    {
        let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
        let parts = self.map(&chunks, |c| map(c));
        parts.into_iter().fold(init, reduce)
    }
}

/// Runs `f` inside a pool of `jobs` threads (when parallel execution is
/// compiled in), otherwise calls it directly.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = jobs {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
    }
    let _ = jobs;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&xs, |x| x * x);
        let par = Exec::Parallel.map(&xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
    }

    #[test]
    fn chunked_sum_is_bitwise_stable() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sin() * 1e-3).collect();
        let sum = |e: Exec| {
            e.chunked_reduce(&xs, 64, |c| c.iter().sum::<f64>(), 0.0, |a, b| a + b)
        };
        assert_eq!(sum(Exec::Sequential).to_bits(), sum(Exec::Parallel).to_bits());
    }
}

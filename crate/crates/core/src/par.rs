// Fan-out helpers. With the `parallel` feature off, `Exec::Parallel` runs
// sequentially; results are identical either way because every item owns its
// rng stream and reductions happen in index order.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
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

    /// Sums per-item vectors of length `dim` in fixed chunks of `chunk`
    /// items, then adds the chunk partials in order. The result does not
    /// depend on the thread count.
    pub fn sum_vectors<T, F>(self, items: &[T], dim: usize, chunk: usize, f: F) -> Vec<f64>
    where
        T: Sync,
        F: Fn(usize, &T, &mut [f64]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        let n_chunks = items.len().div_ceil(chunk);
        let partials = self.map_range(n_chunks, |c| {
            let mut acc = vec![0.0; dim];
            let lo = c * chunk;
            for (i, item) in items[lo..(lo + chunk).min(items.len())].iter().enumerate() {
                f(lo + i, item, &mut acc);
            }
            acc
        });
        let mut total = vec![0.0; dim];
        for p in partials {
            for (t, x) in total.iter_mut().zip(p) {
                *t += x;
            }
        }
        total
    }
}

/// Sets the global worker pool size. Only the first call has an effect.
pub fn init_workers(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

//! Execution strategy for the data-parallel loops (minibatch gradients,
//! per-episode editing, scenario suites, multi-seed runs).
//!
//! With the `parallel` feature disabled, `Exec::Parallel` silently runs the
//! sequential path, so results never depend on the build.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this build can actually run work in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Order-preserving map.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Order-preserving map over `0..n`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Folds fixed-size chunks into accumulators and reduces them in chunk
    /// order. The chunking is identical in both modes; the floating-point
    /// reduction order is too, so results match bit for bit.
    pub fn fold_chunks<T, A, I, F, Rd>(self, items: &[T], chunk: usize, init: I, fold: F, reduce: Rd) -> A
    where
        T: Sync,
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, &T) + Sync + Send,
        Rd: Fn(A, A) -> A + Sync + Send,
    {
        let chunk = chunk.max(1);
        let partials: Vec<A> = {
            let run = |c: &[T]| {
                let mut acc = init();
                c.iter().for_each(|x| fold(&mut acc, x));
                acc
            };
            #[cfg(feature = "parallel")]
            let out = if self.is_parallel() {
                use rayon::prelude::*;
                items.par_chunks(chunk).map(run).collect()
            } else {
                items.chunks(chunk).map(run).collect()
            };
            #[cfg(not(feature = "parallel"))]
            let out = items.chunks(chunk).map(run).collect();
            out
        };
        partials.into_iter().reduce(reduce).unwrap_or_else(init)
    }
}

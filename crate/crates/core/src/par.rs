//! Order-preserving map over independent work items.

use crate::numcore::Parallelism;

/// Applies `f` to every item; output order matches input order under both
/// execution plans.
pub fn map_ordered<T, U, F>(par: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    match par {
        Parallelism::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
    }
}

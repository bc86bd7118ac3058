//! Order-preserving parallel replication.

use rayon::prelude::*;

/// Evaluates `f(0..n)` on the current rayon pool; results keep index order,
/// so downstream reductions are independent of the thread count.
pub fn replicate<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

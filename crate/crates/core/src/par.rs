//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool
//! when [`Parallelism::Rayon`] is requested; without it every call runs
//! sequentially. Results always come back in input order, so reductions
//! over them are deterministic regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Rayon,
    Sequential,
}

impl Parallelism {
    /// Whether this build and setting actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Ordered map over fixed-size chunks. Chunk boundaries depend only on
/// `chunk`, never on the number of workers.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = mode;
    items.chunks(chunk).map(f).collect()
}

/// Ordered fallible map; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], mode: Parallelism, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, mode, f).into_iter().collect()
}

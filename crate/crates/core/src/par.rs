//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) the batch-level loops run on the rayon
//! pool; without it, with `UIO_DETERMINISTIC=1`, or after
//! [`set_sequential(true)`](set_sequential), they run
//! on the calling thread. Results are always returned in input order and every
//! reduction is folded left-to-right, so output is bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);
static ENV_DETERMINISTIC: OnceLock<bool> = OnceLock::new();

/// True when `UIO_DETERMINISTIC=1` is set; read once per process.
pub fn env_deterministic() -> bool {
    *ENV_DETERMINISTIC.get_or_init(|| std::env::var("UIO_DETERMINISTIC").is_ok_and(|v| v == "1"))
}

/// Forces sequential execution at runtime even when the `parallel` feature is on.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) && !env_deterministic()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Mutable per-chunk loop; chunk boundaries are independent of the thread count.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

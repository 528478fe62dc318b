//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over the rayon pool; without
//! it (or after `set_enabled(false)`) they run the same closures in index order
//! on the calling thread. Work is always partitioned by output element, never
//! by a shared reduction, so results are bit-identical in both modes and for
//! any thread count.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Toggle the parallel path at runtime. Has no effect without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn is_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Worker threads the parallel path would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if is_enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Size the global worker pool; 1 also switches to the sequential path.
/// Must run before any parallel work. Without the `parallel` feature only 1 is accepted.
pub fn set_threads(n: usize) -> Result<(), String> {
    if n == 0 {
        return Err("thread count must be positive".into());
    }
    if n == 1 {
        set_enabled(false);
        return Ok(());
    }
    #[cfg(feature = "parallel")]
    {
        set_enabled(true);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Err("built without the `parallel` feature; only 1 thread is available".into())
    }
}

/// Below this many elements elementwise kernels stay sequential.
pub const MIN_PARALLEL_LEN: usize = 1 << 15;

/// Evaluate `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && data.len() > chunk_len {
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Elementwise `dst[i] = f(src[i])`.
pub fn map_into<A, B, F>(src: &[A], dst: &mut [B], f: F)
where
    A: Sync,
    B: Send,
    F: Fn(&A) -> B + Sync + Send,
{
    assert_eq!(src.len(), dst.len());
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && src.len() >= MIN_PARALLEL_LEN {
            dst.par_chunks_mut(MIN_PARALLEL_LEN / 4)
                .zip(src.par_chunks(MIN_PARALLEL_LEN / 4))
                .for_each(|(d, s)| {
                    for (o, i) in d.iter_mut().zip(s) {
                        *o = f(i);
                    }
                });
            return;
        }
    }
    for (o, i) in dst.iter_mut().zip(src) {
        *o = f(i);
    }
}

/// Elementwise `dst[i] = f(a[i], b[i])`.
pub fn zip_map_into<A, B, C, F>(a: &[A], b: &[B], dst: &mut [C], f: F)
where
    A: Sync,
    B: Sync,
    C: Send,
    F: Fn(&A, &B) -> C + Sync + Send,
{
    assert_eq!(a.len(), dst.len());
    assert_eq!(b.len(), dst.len());
    #[cfg(feature = "parallel")]
    {
        if is_enabled() && dst.len() >= MIN_PARALLEL_LEN {
            let c = MIN_PARALLEL_LEN / 4;
            dst.par_chunks_mut(c)
                .zip(a.par_chunks(c).zip(b.par_chunks(c)))
                .for_each(|(d, (x, y))| {
                    for ((o, i), j) in d.iter_mut().zip(x).zip(y) {
                        *o = f(i, j);
                    }
                });
            return;
        }
    }
    for ((o, i), j) in dst.iter_mut().zip(a).zip(b) {
        *o = f(i, j);
    }
}

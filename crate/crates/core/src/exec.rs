//! Execution-policy switch for the crate's data-parallel loops.
//!
//! Every parallel loop in the crate dispatches through the helpers here.
//! A loop runs sequentially when any of these hold:
//!
//! * the `parallel` cargo feature is disabled,
//! * `ISAMPLE_THREADS` is set to `0` or `1`,
//! * the call happens inside [`sequential_scope`].
//!
//! `ISAMPLE_THREADS=n` with `n > 1` caps the worker pool at `n` threads.
//! Unset, the rayon default pool is used.
//!
//! All call sites are written so each parallel unit owns a disjoint output
//! slice and performs its own reductions in a fixed order, which keeps
//! results bit-identical between sequential and parallel execution.

use std::cell::Cell;

use once_cell::sync::Lazy;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Thread cap parsed from `ISAMPLE_THREADS`. `Some(0)`/`Some(1)` force
/// sequential execution; `None` means "use the default pool".
static THREAD_CAP: Lazy<Option<usize>> = Lazy::new(|| {
    std::env::var("ISAMPLE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
});

#[cfg(feature = "parallel")]
static POOL: Lazy<Option<rayon::ThreadPool>> = Lazy::new(|| match *THREAD_CAP {
    Some(n) if n > 1 => rayon::ThreadPoolBuilder::new().num_threads(n).build().ok(),
    _ => None,
});

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all exec helpers forced onto the sequential path.
pub fn sequential_scope<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|c| {
        let prev = c.replace(true);
        let out = f();
        c.set(prev);
        out
    })
}

/// True when the next helper call would actually fan out to worker threads.
pub fn parallel_active() -> bool {
    if FORCE_SEQUENTIAL.with(Cell::get) {
        return false;
    }
    if matches!(*THREAD_CAP, Some(0) | Some(1)) {
        return false;
    }
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match &*POOL {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        return install(|| (0..n).into_par_iter().map(&f).collect());
    }
    (0..n).map(f).collect()
}

/// Applies `f(i, chunk_i)` over `data` split into `chunk` - sized pieces.
/// Chunks are disjoint, so the parallel and sequential paths write the
/// same bytes.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if parallel_active() {
        install(|| {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        });
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Applies `f(i, item_i)` over a mutable slice, one item per unit of work.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        install(|| {
            items
                .par_iter_mut()
                .enumerate()
                .for_each(|(i, item)| f(i, item));
        });
        return;
    }
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it (or when the runtime mode is set to [`ExecMode::Sequential`]) they run
//! the same closures in a plain loop. Every helper writes each output element
//! from exactly one closure invocation with a fixed inner loop order, so both
//! paths produce bit-identical results.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Work below this many inner-loop operations never leaves the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

pub fn set_mode(mode: ExecMode) {
    MODE.store(matches!(mode, ExecMode::Parallel) as u8, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Runs `f` with the mode temporarily switched, restoring the previous mode.
pub fn with_mode<R>(m: ExecMode, f: impl FnOnce() -> R) -> R {
    let prev = mode();
    set_mode(m);
    let out = f();
    set_mode(prev);
    out
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if mode() == ExecMode::Parallel && work >= PAR_THRESHOLD && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work;
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Order-preserving map.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == ExecMode::Parallel && items.len() > 1 {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == ExecMode::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let work = |m| {
            with_mode(m, || {
                let mut v = vec![0.0; 1 << 16];
                for_each_chunk_mut(&mut v, 1000, 1 << 20, |i, c| {
                    for (j, x) in c.iter_mut().enumerate() {
                        *x = ((i * 1000 + j) as f64).sqrt();
                    }
                });
                (v, map_range(100, |i| i * i))
            })
        };
        assert_eq!(work(ExecMode::Sequential), work(ExecMode::Parallel));
    }
}

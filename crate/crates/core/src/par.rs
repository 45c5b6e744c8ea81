//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's current pool;
//! without it they run the same closures in index order. Every helper writes
//! results by index, so outputs never depend on scheduling.

/// Environment variable that caps the worker count used by the CLI.
pub const THREADS_ENV: &str = "NYSTROM_THREADS";

/// Reads [`THREADS_ENV`], defaulting to a single thread.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `f` inside a pool of `threads` workers.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Number of workers the helpers will use from the calling context.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..len).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if current_threads() > 1 && len > 1 {
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    (0..len).map(f).collect()
}

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `data`.
/// `work_hint` is the approximate scalar work per row; small jobs stay serial.
pub fn for_each_row_mut<T, F>(data: &mut [T], row_len: usize, work_hint: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let rows = data.len() / row_len;
        if current_threads() > 1 && rows > 1 && rows.saturating_mul(work_hint) >= 1 << 15 {
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work_hint;
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

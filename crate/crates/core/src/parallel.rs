//! Thread-pool setup and order-independent reductions.

use std::sync::Once;

use rayon::prelude::*;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SPINFLOW_THREADS";

/// Chunk length of deterministic reductions; fixed so results do not depend on the thread count.
pub const REDUCE_CHUNK: usize = 4096;

static POOL: Once = Once::new();

/// Build the global pool once, honoring `SPINFLOW_THREADS` when set.
pub fn ensure_pool() {
    POOL.call_once(|| {
        let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
        if let Some(n) = threads.filter(|&n| n > 0) {
            // A pool installed earlier by the host program wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Sum of `f(k)` over `0..n`, reduced in fixed chunks and then sequentially.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// Mean and standard error of `f(k)` over `0..n`.
pub fn mean_and_stderr<F>(n: usize, f: F) -> (f64, f64)
where
    F: Fn(usize) -> f64 + Sync,
{
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            (lo..hi).fold((0.0, 0.0), |(s, q), k| {
                let v = f(k);
                (s + v, q + v * v)
            })
        })
        .collect();
    let (s, q) = partial.iter().fold((0.0, 0.0), |(a, b), (s, q)| (a + s, b + q));
    let nf = n as f64;
    let mean = s / nf;
    let var = if n > 1 { ((q - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    (mean, (var / nf).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_closed_form() {
        let n = 10_000;
        assert_eq!(chunked_sum(n, |k| k as f64), (n * (n - 1) / 2) as f64);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let (m, se) = mean_and_stderr(5000, |_| 2.5);
        assert_eq!(m, 2.5);
        assert_eq!(se, 0.0);
    }
}

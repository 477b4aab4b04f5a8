//! Deterministic fan-out helper. Work items are split into fixed contiguous
//! chunks; per-item rng streams are derived by index, so the worker count
//! never changes any output. `DFORMER_THREADS` caps the pool.

pub fn thread_count() -> usize {
    if let Ok(v) = std::env::var("DFORMER_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(4)
}

/// Applies `f(index) -> T` to 0..n, possibly on several threads, and returns
/// the results in index order.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = thread_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + i));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("worker filled slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_in_index_order() {
        let xs = parallel_map(17, |i| i * i);
        assert_eq!(xs, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }
}

//! Order-preserving fan-out over scoped threads.

/// `f(0..n)` evaluated on up to `workers` threads, results in index order.
pub(crate) fn map_indexed<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| scope.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn preserves_order() {
        for w in 1..5 {
            assert_eq!(super::map_indexed(10, w, |i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(super::map_indexed(0, 3, |i| i).is_empty());
    }
}

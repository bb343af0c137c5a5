//! Data-parallel map helpers.
//!
//! With the `parallel` feature (on by default) the `map_*` functions run on
//! the rayon pool; without it they degrade to plain sequential iteration.
//! Every helper returns results in input order, so callers that reduce the
//! output sequentially stay bit-deterministic regardless of thread count.

/// How a data-parallel loop should be executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Use the rayon pool when the `parallel` feature is compiled in.
    #[default]
    Parallel,
    /// Always run on the calling thread.
    Sequential,
}

impl Execution {
    /// Whether this mode will actually fan out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_indexed_with(Execution::Parallel, n, f)
}

/// [`map_indexed`] with an explicit execution mode.
pub fn map_indexed_with<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Map over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_slice_with(Execution::Parallel, items, f)
}

/// [`map_slice`] with an explicit execution mode.
pub fn map_slice_with<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Number of worker threads the parallel helpers will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_both_modes() {
        let par = map_indexed_with(Execution::Parallel, 1000, |i| i * i);
        let seq = map_indexed_with(Execution::Sequential, 1000, |i| i * i);
        assert_eq!(par, seq);
        assert_eq!(par[31], 961);
    }

    #[test]
    fn slice_map_matches_iterator() {
        let v: Vec<u32> = (0..257).collect();
        let out = map_slice(&v, |x| x + 1);
        assert_eq!(out, v.iter().map(|x| x + 1).collect::<Vec<_>>());
    }
}

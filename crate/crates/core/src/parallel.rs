//! Order-preserving data-parallel map with a sequential fallback.

/// How per-sample work is scheduled.
///
/// `Parallel` uses the rayon global pool when the `parallel` feature is
/// enabled and silently degrades to `Sequential` otherwise. Both produce the
/// same output vector in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this executor will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, returning results in slice order.
    pub fn map_slice<I, T, F>(self, items: &[I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Like [`Exec::map_slice`] but short-circuits on the first error (in
    /// index order for the sequential path).
    pub fn try_map_slice<I, T, E, F>(self, items: &[I], f: F) -> Result<Vec<T>, E>
    where
        I: Sync,
        T: Send,
        E: Send,
        F: Fn(&I) -> Result<T, E> + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_executors_preserve_order() {
        let seq = Exec::Sequential.map_indexed(1000, |i| i * i);
        let par = Exec::Parallel.map_indexed(1000, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[31], 961);
    }

    #[test]
    fn try_map_reports_error() {
        let items: Vec<i32> = (0..50).collect();
        let r: Result<Vec<i32>, String> =
            Exec::Parallel.try_map_slice(&items, |&x| if x == 17 { Err("bad".into()) } else { Ok(x) });
        assert!(r.is_err());
    }
}

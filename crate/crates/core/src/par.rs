//! Data-parallel helpers. With the `parallel` feature, work fans out over the
//! rayon pool; without it every call runs sequentially. Results are always
//! collected in input order, and reductions happen afterwards on the caller's
//! thread, so both paths produce bit-identical numbers.

/// Which path a batch computation takes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// Map `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
    }
}

/// Map `f` over fixed-size chunks, preserving chunk order. Chunk boundaries
/// depend only on `chunk`, never on the thread count.
pub fn map_chunks<T, R, F>(exec: Execution, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    match exec {
        Execution::Sequential => items.chunks(chunk).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_chunks(chunk).map(f).collect()
        }
    }
}

/// Map over `0..n`, preserving order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sums_match_across_paths() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sqrt()).collect();
        let seq: Vec<f64> = map_chunks(Execution::Sequential, &xs, 7, |c| c.iter().sum());
        let dflt: Vec<f64> = map_chunks(Execution::default(), &xs, 7, |c| c.iter().sum());
        assert_eq!(seq, dflt);
        assert_eq!(
            map_range(Execution::default(), 5, |i| i * i),
            vec![0, 1, 4, 9, 16]
        );
    }
}

//! Execution policy. Data-parallel loops go through these helpers so that the
//! sequential path is always available, with or without the `parallel` feature.

/// How site loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Parallel when the feature is compiled in, sequential otherwise.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec.effective() {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Fill consecutive chunks of `out` (each of length `chunk`) with `f(index, chunk)`.
pub fn for_each_chunk<T, F>(exec: Execution, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    match exec.effective() {
        Execution::Sequential => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }
            #[cfg(not(feature = "parallel"))]
            {
                out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let a = map_range(Execution::Sequential, 100, |i| i * i);
        let b = map_range(Execution::Parallel, 100, |i| i * i);
        assert_eq!(a, b);
        let mut x = vec![0usize; 12];
        for_each_chunk(Execution::Parallel, &mut x, 3, |i, c| c.iter_mut().for_each(|v| *v = i));
        assert_eq!(x, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }
}

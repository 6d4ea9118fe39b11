//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool of
//! the requested size; `workers == 1` or a build without the feature runs the
//! same closure in a plain loop. Output order always matches input order.

/// Worker count meaning "use rayon's global pool".
pub const ALL_CORES: usize = 0;

pub fn map_indexed<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    if workers == 1 || items.len() < 2 {
        return sequential(items, &f);
    }
    imp::map_indexed(items, workers, f)
}

pub fn map_range<R, F>(n: usize, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map_indexed(&idx, workers, |_, &i| f(i))
}

fn sequential<T, R, F>(items: &[T], f: &F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn is_parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    pub fn map_indexed<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        let run = || {
            items
                .par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect()
        };
        if workers == super::ALL_CORES {
            return run();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn map_indexed<T, R, F>(items: &[T], _workers: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        super::sequential(items, &f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let items: Vec<u64> = (0..257).collect();
        let expect: Vec<u64> = items.iter().map(|x| x * x + 1).collect();
        for workers in [0, 1, 2, 8] {
            assert_eq!(map_indexed(&items, workers, |_, x| x * x + 1), expect);
        }
        assert_eq!(map_range(5, 3, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}

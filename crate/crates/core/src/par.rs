//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it, or
//! inside [`sequential`], they run on the calling thread. Results are always
//! assembled in index order so parallel and sequential runs are bit-identical.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all helpers on this thread forced to sequential execution.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

/// Whether helpers called from this thread will fan out.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// `(0..n).map(f).collect()` in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Map over a slice in order.
pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Apply `f(chunk_index, chunk)` to consecutive mutable chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let par = map_range(1000, |i| (i as f64).sqrt());
        let seq = sequential(|| map_range(1000, |i| (i as f64).sqrt()));
        assert_eq!(par, seq);
        assert!(sequential(|| !is_parallel()));
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 103];
        for_each_chunk_mut(&mut v, 10, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 10 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }
}

//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! run on the calling thread. Results are always returned in index order so
//! downstream reductions see the same sequence either way.

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in slice order.
#[cfg(feature = "parallel")]
pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Applies `f` to disjoint mutable chunks of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// True when compiled with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

//! Deterministic data-parallel helpers.
//!
//! With the `parallel` feature the loops below run on rayon; without it they
//! run sequentially. Both paths produce bitwise-identical results: parallel
//! work is always over disjoint output regions or collected in index order,
//! and floating-point reductions keep a fixed association order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Split `out` into `n_tasks` contiguous chunks of `chunk_len` elements and
/// run `f(task_index, chunk)` on each. `out.len()` must equal
/// `n_tasks * chunk_len`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference version of [`for_each_chunk`], always compiled; the
/// bench suite uses it to compare against the parallel path.
pub fn for_each_chunk_seq<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Split a row-major `out` of `row_len`-element rows into blocks of up to
/// `max_rows` rows (the last block may be shorter) and run
/// `f(first_row_index, block)` on each. Kernels block rows so that operands
/// shared across a block are read once per block instead of once per row.
pub fn for_each_row_block<T, F>(out: &mut [T], row_len: usize, max_rows: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && max_rows > 0 && out.len() % row_len == 0);
    let block = row_len * max_rows;
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(block)
            .enumerate()
            .for_each(|(b, c)| f(b * max_rows, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(block)
            .enumerate()
            .for_each(|(b, c)| f(b * max_rows, c));
    }
}

/// Sequential reference version of [`for_each_row_block`], always compiled.
pub fn for_each_row_block_seq<T, F>(out: &mut [T], row_len: usize, max_rows: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    debug_assert!(row_len > 0 && max_rows > 0 && out.len() % row_len == 0);
    let block = row_len * max_rows;
    out.chunks_mut(block)
        .enumerate()
        .for_each(|(b, c)| f(b * max_rows, c));
}

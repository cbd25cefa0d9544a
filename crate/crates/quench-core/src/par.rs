//! Data-parallel primitives with a sequential fallback.
//!
//! With the `parallel` feature (default) the element-wise kernels run on
//! rayon; without it they degrade to plain loops. Reductions never depend on
//! the execution backend: sums are accumulated per fixed-size chunk
//! (Neumaier-compensated) and the chunk partials are combined in index order,
//! so `sum`/`dot`/`mean` produce bitwise identical results for any thread
//! count, including the sequential build.

/// Chunk length for deterministic reductions. Fixed by definition, not by
/// thread count: changing it changes rounding, so it is part of the numeric
/// contract.
pub const REDUCE_CHUNK: usize = 4096;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fill `out[i] = f(i)` for all `i`.
pub fn fill_indexed<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync,
{
    #[cfg(feature = "parallel")]
    {
        out.par_iter_mut()
            .with_min_len(1024)
            .enumerate()
            .for_each(|(i, v)| *v = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, v) in out.iter_mut().enumerate() {
            *v = f(i);
        }
    }
}

/// Apply `f` to every element in place.
pub fn map_inplace<F>(values: &mut [f64], f: F)
where
    F: Fn(f64) -> f64 + Sync,
{
    #[cfg(feature = "parallel")]
    {
        values
            .par_iter_mut()
            .with_min_len(1024)
            .for_each(|v| *v = f(*v));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for v in values.iter_mut() {
            *v = f(*v);
        }
    }
}

/// Run `f(j)` for every row index `j in 0..rows`. Used by stencil kernels that
/// write disjoint row slices.
pub fn for_each_row<F>(rows: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..rows).into_par_iter().for_each(f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        for j in 0..rows {
            f(j);
        }
    }
}

/// Process disjoint row slices of `out` in parallel: `f(j, row_slice)`.
pub fn for_each_row_mut<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % row_len, 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(j, row)| f(j, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (j, row) in out.chunks_mut(row_len).enumerate() {
            f(j, row);
        }
    }
}

/// Neumaier-compensated sequential sum of a slice.
fn neumaier_slice(values: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    (sum, comp)
}

/// Deterministic compensated sum. Chunk partials are computed independently
/// (possibly in parallel) and combined in index order.
pub fn det_sum(values: &[f64]) -> f64 {
    let partials: Vec<(f64, f64)>;
    #[cfg(feature = "parallel")]
    {
        partials = values.par_chunks(REDUCE_CHUNK).map(neumaier_slice).collect();
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = values.chunks(REDUCE_CHUNK).map(neumaier_slice).collect();
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (s, c) in partials {
        let x = s;
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
        comp += c;
    }
    sum + comp
}

/// Deterministic compensated sum of `f(i)` over `0..n` without materializing
/// the terms per element beyond one chunk at a time.
pub fn det_sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let chunk_partial = |c: usize| {
        let start = c * REDUCE_CHUNK;
        let end = (start + REDUCE_CHUNK).min(n);
        let mut sum = 0.0;
        let mut comp = 0.0;
        for i in start..end {
            let x = f(i);
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        (sum, comp)
    };
    let partials: Vec<(f64, f64)>;
    #[cfg(feature = "parallel")]
    {
        partials = (0..n_chunks).into_par_iter().map(chunk_partial).collect();
    }
    #[cfg(not(feature = "parallel"))]
    {
        partials = (0..n_chunks).map(chunk_partial).collect();
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (s, c) in partials {
        let t = sum + s;
        if sum.abs() >= s.abs() {
            comp += (sum - t) + s;
        } else {
            comp += (s - t) + sum;
        }
        sum = t;
        comp += c;
    }
    sum + comp
}

/// Maximum of `f(i)` over `0..n`. Max is exactly associative on finite floats,
/// so an ordinary parallel reduce is already deterministic.
pub fn det_max_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n)
            .into_par_iter()
            .map(f)
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).fold(f64::NEG_INFINITY, f64::max)
    }
}

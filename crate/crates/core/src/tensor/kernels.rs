//! Raw matmul kernels.
//!
//! Three layouts cover everything the graph needs without materializing
//! transposes: `nn` (A·B), `nt` (A·Bᵀ), and `tn` (Aᵀ·B). Each has a serial
//! implementation; with the `parallel` feature the dispatching entry points
//! split output rows across the rayon pool once the work is large enough to
//! pay for it. Rows are computed independently, so results are bit-identical
//! across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum multiply-accumulate count before the parallel path engages.
pub const PAR_MIN_MACS: usize = 1 << 20;

#[cfg(feature = "parallel")]
macro_rules! dispatch_rows {
    ($macs:expr, $rows:expr, $serial:expr, $parallel:expr) => {
        if $macs >= PAR_MIN_MACS && $rows > 1 {
            $parallel
        } else {
            $serial
        }
    };
}

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    dispatch_rows!(
        m * k * n,
        m,
        matmul_serial(a, b, m, k, n, out),
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(a, b, k, n, i, row))
    );
    #[cfg(not(feature = "parallel"))]
    matmul_serial(a, b, m, k, n, out);
}

pub fn matmul_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a, b, k, n, i, row);
    }
}

#[inline]
fn matmul_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, row: &mut [f64]) {
    row.fill(0.0);
    for p in 0..k {
        let a_ip = a[i * k + p];
        if a_ip == 0.0 {
            continue;
        }
        let b_row = &b[p * n..p * n + n];
        for (o, &bv) in row.iter_mut().zip(b_row) {
            *o += a_ip * bv;
        }
    }
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ  (rows of both operands are contiguous dots)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    #[cfg(feature = "parallel")]
    dispatch_rows!(
        m * n * k,
        m,
        matmul_nt_serial(a, b, m, n, k, out),
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, row)| matmul_nt_row(a, b, n, k, i, row))
    );
    #[cfg(not(feature = "parallel"))]
    matmul_nt_serial(a, b, m, n, k, out);
}

pub fn matmul_nt_serial(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * k);
    for (i, row) in out.chunks_mut(k).enumerate() {
        matmul_nt_row(a, b, n, k, i, row);
    }
}

#[inline]
fn matmul_nt_row(a: &[f64], b: &[f64], n: usize, _k: usize, i: usize, row: &mut [f64]) {
    let a_row = &a[i * n..i * n + n];
    for (p, o) in row.iter_mut().enumerate() {
        let b_row = &b[p * n..p * n + n];
        let mut acc = 0.0;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    #[cfg(feature = "parallel")]
    dispatch_rows!(
        m * k * n,
        k,
        matmul_tn_serial(a, b, m, k, n, out),
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| matmul_tn_row(a, b, m, k, n, p, row))
    );
    #[cfg(not(feature = "parallel"))]
    matmul_tn_serial(a, b, m, k, n, out);
}

pub fn matmul_tn_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for (p, row) in out.chunks_mut(n).enumerate() {
        matmul_tn_row(a, b, m, k, n, p, row);
    }
}

#[inline]
fn matmul_tn_row(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, p: usize, row: &mut [f64]) {
    row.fill(0.0);
    for i in 0..m {
        let a_ip = a[i * k + p];
        if a_ip == 0.0 {
            continue;
        }
        let b_row = &b[i * n..i * n + n];
        for (o, &bv) in row.iter_mut().zip(b_row) {
            *o += a_ip * bv;
        }
    }
}

//! Dense kernels shared by the tape ops.
//!
//! Matrix products go through `matrixmultiply`. Outputs are cut into fixed
//! blocks of rows and every block is computed by one call, so the
//! sequential and rayon paths perform identical arithmetic and agree bit
//! for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Outputs smaller than this run sequentially even when rayon is enabled.
#[cfg(feature = "parallel")]
const PAR_MIN_LEN: usize = 4096;

/// Execution strategy for row-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// Calls `f(row_index, row)` for each `width`-sized chunk of `out`.
pub fn for_each_row<F>(exec: Exec, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    match exec {
        Exec::Sequential => out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            if out.len() < PAR_MIN_LEN {
                out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            } else {
                out.par_chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            }
        }
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Output rows per matrix-product block.
const ROW_BLOCK: usize = 64;

/// `out[m x n] += A . B` for strided views of `A` (`m x k`) and `B`
/// (`k x n`); `out` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "lhs view out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "rhs view out of bounds");
    assert!(out.len() >= m * n, "output too small");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Calls `f(first_row, block)` for each block of up to `ROW_BLOCK` rows.
fn for_each_row_block<F>(exec: Exec, out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    let chunk = ROW_BLOCK * width;
    match exec {
        Exec::Sequential => out.chunks_mut(chunk).enumerate().for_each(|(i, r)| f(i * ROW_BLOCK, r)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            if out.len() < PAR_MIN_LEN {
                out.chunks_mut(chunk).enumerate().for_each(|(i, r)| f(i * ROW_BLOCK, r));
            } else {
                out.par_chunks_mut(chunk).enumerate().for_each(|(i, r)| f(i * ROW_BLOCK, r));
            }
        }
    }
}

/// `out[m x n] = a[m x k] . b[k x n]`
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_acc(exec, a, b, m, k, n, out);
}

/// `out[m x n] += a[m x k] . b[k x n]`
pub fn matmul_acc(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!((a.len(), b.len(), out.len()), (m * k, k * n, m * n));
    for_each_row_block(exec, out, n, |i0, o| {
        let rows = o.len() / n;
        gemm_strided(rows, k, n, &a[i0 * k..], (k, 1), b, (n, 1), o);
    });
}

/// `out[m x n] += a[m x k] . b[n x k]^T`
pub fn matmul_nt_acc(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!((a.len(), b.len(), out.len()), (m * k, n * k, m * n));
    for_each_row_block(exec, out, n, |i0, o| {
        let rows = o.len() / n;
        gemm_strided(rows, k, n, &a[i0 * k..], (k, 1), b, (1, k), o);
    });
}

/// `out[k x n] += a[m x k]^T . g[m x n]`
pub fn matmul_tn_acc(exec: Exec, a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!((a.len(), g.len(), out.len()), (m * k, m * n, k * n));
    for_each_row_block(exec, out, n, |p0, o| {
        let rows = o.len() / n;
        gemm_strided(rows, m, n, &a[p0..], (1, k), g, (n, 1), o);
    });
}

/// Single-block versions used inside batched ops.
pub mod block {
    use super::gemm_strided;

    /// `out += a[m x k] . b[k x n]`
    pub fn gemm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        gemm_strided(m, k, n, a, (k, 1), b, (n, 1), out);
    }

    /// `out += a[m x k] . b[n x k]^T`
    pub fn gemm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        gemm_strided(m, k, n, a, (k, 1), b, (1, k), out);
    }

    /// `out[k x n] += a[m x k]^T . g[m x n]`
    pub fn gemm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        gemm_strided(k, m, n, a, (1, k), g, (n, 1), out);
    }
}

/// Runs `f(batch_index, out_block)` over `batch` contiguous blocks of `out`.
pub fn for_each_block<F>(exec: Exec, out: &mut [f64], batch: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if batch == 0 {
        return;
    }
    let width = out.len() / batch;
    if width == 0 {
        return;
    }
    match exec {
        Exec::Sequential => out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            if out.len() < PAR_MIN_LEN {
                out.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            } else {
                out.par_chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
            }
        }
    }
}

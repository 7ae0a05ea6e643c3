//! Dense f64 kernels behind the tape ops.
//!
//! Matrix products go through `matrixmultiply`, whose blocking depends only on
//! the operand sizes and the detected CPU features, so repeated runs on one
//! machine are bitwise reproducible.

/// `c += a · b` for row-major operands described by `(rows, cols)` and
/// strides, so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every element the kernel reads or writes.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    dgemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    dgemm(k, m, n, a, (1, k), b, (n, 1), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    dgemm(m, k, n, a, (k, 1), b, (1, k), c);
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

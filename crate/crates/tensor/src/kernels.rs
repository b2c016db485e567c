//! Raw slice kernels shared by the differentiable operations.

use rayon::prelude::*;

use crate::element::Element;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

fn gemm_rows<T: Element>(k: usize, n: usize, a_rows: &[T], b: &[T], c_rows: &mut [T]) {
    for (a_row, c_row) in a_rows.chunks_exact(k).zip(c_rows.chunks_exact_mut(n)) {
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * n..(kk + 1) * n], c_row);
            }
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    if m * k * n < PAR_THRESHOLD || m < 2 {
        gemm_rows(k, n, a, b, c);
        return;
    }
    let rows_per_task = (PAR_THRESHOLD / (k * n)).clamp(1, m);
    a.par_chunks(rows_per_task * k)
        .zip(c.par_chunks_mut(rows_per_task * n))
        .for_each(|(a_rows, c_rows)| gemm_rows(k, n, a_rows, b, c_rows));
}

/// Transpose of a row-major `rows × cols` matrix.
pub(crate) fn transpose<T: Element>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// Decomposes `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(transpose(2, 3, &a), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gemm_parallel_matches_serial() {
        let (m, k, n) = (300, 40, 50);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        let mut c1 = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c1);
        let mut c2 = vec![0.0; m * n];
        gemm_rows(k, n, &a, &b, &mut c2);
        assert_eq!(c1, c2);
    }
}

//! Row-major matrix products.
//!
//! All three layouts reduce to one register-blocked kernel for `a·b`. Every
//! output element sums its products over the contraction index in increasing
//! order, then adds the sum to the existing value of `c`. Row blocks are
//! independent, so any split of rows across threads gives identical bits.

use rayon::prelude::*;

use super::tensor::Scalar;

/// Below this many multiply-adds the serial loop is used.
const PAR_THRESHOLD: usize = 1 << 18;

const MR: usize = 4;

/// `c[rows×n] += a[rows×k] · b[k×n]` for a block of at most `MR` rows,
/// in column tiles of `NR`.
#[inline(always)]
fn block_rows<T: Scalar, const NR: usize>(a: &[T], b: &[T], c: &mut [T], rows: usize, k: usize, n: usize) {
    let full = n / NR * NR;
    if rows == MR {
        let mut j0 = 0;
        while j0 < full {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[r * k + p];
                    for (x, &bv) in row.iter_mut().zip(bp) {
                        *x = *x + av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for (x, &v) in c[r * n + j0..r * n + j0 + NR].iter_mut().zip(row) {
                    *x = *x + v;
                }
            }
            j0 += NR;
        }
    } else {
        let mut j0 = 0;
        while j0 < full {
            for r in 0..rows {
                let mut acc = [T::zero(); NR];
                for p in 0..k {
                    let av = a[r * k + p];
                    for (x, &bv) in acc.iter_mut().zip(&b[p * n + j0..p * n + j0 + NR]) {
                        *x = *x + av * bv;
                    }
                }
                for (x, &v) in c[r * n + j0..r * n + j0 + NR].iter_mut().zip(&acc) {
                    *x = *x + v;
                }
            }
            j0 += NR;
        }
    }
    for r in 0..rows {
        for j in full..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[r * k + p] * b[p * n + j];
            }
            c[r * n + j] = c[r * n + j] + acc;
        }
    }
}

/// Same arithmetic compiled for AVX2. No fused multiply-add is emitted, so
/// results match the baseline build bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn block_rows_avx2<T: Scalar>(a: &[T], b: &[T], c: &mut [T], rows: usize, k: usize, n: usize) {
    if n >= 16 {
        block_rows::<T, 16>(a, b, c, rows, k, n)
    } else {
        block_rows::<T, 8>(a, b, c, rows, k, n)
    }
}

fn kernel<T: Scalar>(a: &[T], b: &[T], c: &mut [T], rows: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        unsafe { block_rows_avx2(a, b, c, rows, k, n) };
        return;
    }
    block_rows::<T, 8>(a, b, c, rows, k, n)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let run = |(blk, cb): (usize, &mut [T])| {
        let rows = cb.len() / n;
        let i0 = blk * MR;
        kernel(&a[i0 * k..(i0 + rows) * k], b, cb, rows, k, n);
    };
    if m * n * k >= PAR_THRESHOLD && m > MR && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(MR * n).enumerate().for_each(run);
    } else {
        c.chunks_mut(MR * n).enumerate().for_each(run);
    }
}

pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 16;
    let mut t = vec![T::zero(); rows * cols];
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    t[j * rows + i] = x[i * cols + j];
                }
            }
        }
    }
    t
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    let at = transpose(a, k, m);
    gemm_nn(&at, b, c, m, k, n);
}

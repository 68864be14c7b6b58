//! Dense matmul kernels. Large products partition output rows across rayon
//! workers; every output element is accumulated in the same index order on
//! every path, so results are bit-identical regardless of thread count or of
//! the sequential-mode flag.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::Scalar;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the current thread. Timing comparisons use this to
/// take scheduler noise out of wall-time measurements; results never change.
pub fn set_sequential_kernels(on: bool) {
    SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn sequential_kernels() -> bool {
    SEQUENTIAL.load(Ordering::Relaxed)
}

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 20;

fn run_rows<T: Send>(rows: &mut [T], work: usize, f: impl Fn(usize, &mut T) + Send + Sync) {
    if work >= PAR_THRESHOLD && !sequential_kernels() {
        rows.par_iter_mut().enumerate().for_each(|(i, r)| f(i, r));
    } else {
        for (i, r) in rows.iter_mut().enumerate() {
            f(i, r);
        }
    }
}

/// out[m×n] = a[m×k] · b[k×n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut rows: Vec<(&[T], &mut [T])> = a.chunks(k).zip(out.chunks_mut(n)).collect();
    run_rows(&mut rows, m * k * n, |_, (arow, orow)| {
        for o in orow.iter_mut() {
            *o = T::ZERO;
        }
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ  (row-against-row dot products)
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut rows: Vec<(&[T], &mut [T])> = a.chunks(k).zip(out.chunks_mut(n)).collect();
    run_rows(&mut rows, m * k * n, |_, (arow, orow)| {
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
}

/// out[m×n] = a[p×m]ᵀ · b[p×n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], p: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    let mut rows: Vec<&mut [T]> = out.chunks_mut(n).collect();
    run_rows(&mut rows, m * p * n, |i, orow| {
        for o in orow.iter_mut() {
            *o = T::ZERO;
        }
        for pp in 0..p {
            let coef = a[pp * m + i];
            let brow = &b[pp * n..(pp + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    });
}

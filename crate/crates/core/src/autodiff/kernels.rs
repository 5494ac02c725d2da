//! Plain matrix-product loops. Rows of the output are computed
//! independently, so splitting them across threads does not change any
//! floating-point result.

use rayon::prelude::*;

use super::tensor::Real;

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `a [n x k] * b [k x m]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if m == 0 {
        return out;
    }
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (cv, &bv) in c.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

/// `a [n x m] * b^T` where `b` is `[k x m]`; result `[n x k]`.
pub(crate) fn matmul_bt<T: Real>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    if k == 0 {
        return out;
    }
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * m..(i + 1) * m];
        for (p, cv) in c.iter_mut().enumerate() {
            let br = &b[p * m..(p + 1) * m];
            *cv = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `a^T * b` where `a` is `[n x k]` and `b` is `[n x m]`; result `[k x m]`.
pub(crate) fn matmul_at<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    if m == 0 {
        return out;
    }
    let row = |(p, c): (usize, &mut [T])| {
        for i in 0..n {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let br = &b[i * m..(i + 1) * m];
            for (cv, &bv) in c.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    };
    if n * k * m >= PAR_THRESHOLD {
        out.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        out.chunks_mut(m).enumerate().for_each(row);
    }
    out
}

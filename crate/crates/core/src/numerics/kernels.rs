//! Single-threaded dense kernels. All accumulate into `out` in a fixed order.
//!
//! Zero multiplicands are skipped so that fully masked attention weights leave
//! the accumulator untouched (including the sign of zero).

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_COEFF: f64 = 0.044715;

/// Tanh approximation used by GPT-2.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::of(GELU_COEFF) * x * x * x);
    T::half() * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_COEFF);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let d_inner = c * (T::one() + T::of(3.0) * k * x * x);
    T::half() * (T::one() + t) + T::half() * x * (T::one() - t * t) * d_inner
}

/// Numerically stable softmax of one strided lane, written to `out`.
pub fn softmax_lane<T: Scalar>(x: &[T], out: &mut [T], offset: usize, len: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for i in 0..len {
        max = max.max(x[offset + i * stride]);
    }
    let mut sum = T::zero();
    for i in 0..len {
        let e = (x[offset + i * stride] - max).exp();
        out[offset + i * stride] = e;
        sum += e;
    }
    for i in 0..len {
        out[offset + i * stride] /= sum;
    }
}

/// Negative log-softmax of `row` at `target`, stabilized by the row maximum.
pub fn token_nll<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

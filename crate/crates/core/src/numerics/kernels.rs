//! Plain (tape-free) kernels shared by the graph ops.

use super::Real;

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`.
///
/// `ta` means `a` is stored `k×m`; `tb` means `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax over a strided axis, in place.
pub fn softmax_axis<T: Real>(x: &mut [T], outer: usize, axis: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..axis {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = T::zero();
            for a in 0..axis {
                let e = (x[base + a * inner] - max).exp();
                x[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis {
                x[base + a * inner] /= sum;
            }
        }
    }
}

/// Softmax of one row restricted to `keep` positions; the rest become 0.
/// A row with nothing kept is all zeros.
pub fn masked_softmax_row<T: Real>(row: &mut [T], keep: &[bool]) {
    let mut max = T::neg_infinity();
    for (v, &k) in row.iter().zip(keep) {
        if k {
            max = max.max(*v);
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (v, &k) in row.iter_mut().zip(keep) {
        if k {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let row64: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
    let lse = log_sum_exp(&row64);
    row64.iter().map(|v| v - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

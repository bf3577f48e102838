//! Plain loop kernels. Row-major throughout; the innermost loop always walks
//! contiguous memory so the compiler can vectorize it.

use super::Float;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &b) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * b;
            }
        }
    }
    c
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt<F: Float>(g: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(g_row, b_row);
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_at<F: Float>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &g) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * g;
            }
        }
    }
    out
}

pub(crate) fn transpose<F: Float>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub(crate) fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<F: Float>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + k;
            let max = (0..n).fold(F::neg_infinity(), |m, i| m.max(x[idx(i)]));
            let mut sum = F::zero();
            for i in 0..n {
                let e = (x[idx(i)] - max).exp();
                out[idx(i)] = e;
                sum += e;
            }
            for i in 0..n {
                out[idx(i)] = out[idx(i)] / sum;
            }
        }
    }
    out
}

pub(crate) fn log_softmax<F: Float>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + k;
            let max = (0..n).fold(F::neg_infinity(), |m, i| m.max(x[idx(i)]));
            let sum: F = (0..n).map(|i| (x[idx(i)] - max).exp()).sum();
            let log_z = max + sum.ln();
            for i in 0..n {
                out[idx(i)] = x[idx(i)] - log_z;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

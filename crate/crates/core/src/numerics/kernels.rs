//! Plain slice kernels shared by the forward and backward rules.

use super::Scalar;

/// `orow += Σ_t coef[t]·rows[t]`, four source rows per pass over `orow`.
#[inline]
fn accumulate_rows<T: Scalar>(orow: &mut [T], coef: impl Fn(usize) -> T, row: impl Fn(usize) -> usize, b: &[T], k: usize) {
    let p = orow.len();
    let mut r = 0;
    while r + 4 <= k {
        let (c0, c1, c2, c3) = (coef(r), coef(r + 1), coef(r + 2), coef(r + 3));
        if c0 != T::zero() || c1 != T::zero() || c2 != T::zero() || c3 != T::zero() {
            let b0 = &b[row(r)..row(r) + p];
            let b1 = &b[row(r + 1)..row(r + 1) + p];
            let b2 = &b[row(r + 2)..row(r + 2) + p];
            let b3 = &b[row(r + 3)..row(r + 3) + p];
            for j in 0..p {
                orow[j] += c0 * b0[j] + c1 * b1[j] + c2 * b2[j] + c3 * b3[j];
            }
        }
        r += 4;
    }
    for r in r..k {
        let c = coef(r);
        if c != T::zero() {
            axpy(orow, c, &b[row(r)..row(r) + p]);
        }
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`
pub fn gemm_nn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        accumulate_rows(&mut out[i * p..(i + 1) * p], |r| arow[r], |r| r * p, b, k);
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`
pub fn gemm_nt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, p: usize) {
    // 2×2 tiles of dot products with independent accumulators.
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let mut j = 0;
        while j + 2 <= p {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let (mut s00, mut s01, mut s10, mut s11) = (T::zero(), T::zero(), T::zero(), T::zero());
            for r in 0..k {
                let (x0, x1, y0, y1) = (a0[r], a1[r], b0[r], b1[r]);
                s00 += x0 * y0;
                s01 += x0 * y1;
                s10 += x1 * y0;
                s11 += x1 * y1;
            }
            out[i * p + j] += s00;
            out[i * p + j + 1] += s01;
            out[(i + 1) * p + j] += s10;
            out[(i + 1) * p + j + 1] += s11;
            j += 2;
        }
        if j < p {
            let bj = &b[j * k..(j + 1) * k];
            out[i * p + j] += dot(a0, bj);
            out[(i + 1) * p + j] += dot(a1, bj);
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            out[i * p + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×p] += a[k×m]ᵀ · b[k×p]`
pub fn gemm_tn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        accumulate_rows(&mut out[i * p..(i + 1) * p], |r| a[r * m + i], |r| r * p, b, k);
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn add_into<T: Scalar>(out: &mut [T], x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    half * x * (T::one() + (s * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let t = (s * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::lit(3.0) * c * x * x)
}

//! Dense kernels shared by the tape and the inference decoder.
//!
//! Loop orders keep the innermost loop contiguous so the compiler can
//! vectorize; reductions use a fixed accumulation order so results are
//! reproducible bit-for-bit.

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (b0, rest) = b[p * n..(p + 4) * n].split_at(n);
            let (b1, rest) = rest.split_at(n);
            let (b2, b3) = rest.split_at(n);
            axpy4(orow, [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]], [b0, b1, b2, b3]);
            p += 4;
        }
        for p in p..k {
            axpy(orow, arow[p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut i = 0;
    while i + 4 <= m {
        let (g0, rest) = g[i * n..(i + 4) * n].split_at(n);
        let (g1, rest) = rest.split_at(n);
        let (g2, g3) = rest.split_at(n);
        for p in 0..k {
            let coef = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            axpy4(&mut out[p * n..(p + 1) * n], coef, [g0, g1, g2, g3]);
        }
        i += 4;
    }
    for i in i..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut out[p * n..(p + 1) * n], a[i * k + p], grow);
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let d = dot4(
                grow,
                [
                    &b[p * n..(p + 1) * n],
                    &b[(p + 1) * n..(p + 2) * n],
                    &b[(p + 2) * n..(p + 3) * n],
                    &b[(p + 3) * n..(p + 4) * n],
                ],
            );
            for (o, v) in orow[p..p + 4].iter_mut().zip(d) {
                *o += v;
            }
            p += 4;
        }
        for p in p..k {
            orow[p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

fn axpy(out: &mut [f64], c: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

/// Four sequential `axpy` updates fused into one pass; each element sees the same addition order.
fn axpy4(out: &mut [f64], c: [f64; 4], x: [&[f64]; 4]) {
    let n = out.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        let mut o = out[j];
        o += c[0] * x0[j];
        o += c[1] * x1[j];
        o += c[2] * x2[j];
        o += c[3] * x3[j];
        out[j] = o;
    }
}

/// Four dot products sharing the left operand, each reduced exactly as [`dot`] does.
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let n = a.len();
    let b = [&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]];
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        for (r, br) in acc.iter_mut().zip(&b) {
            r[0] += a[i] * br[i];
            r[1] += a[i + 1] * br[i + 1];
            r[2] += a[i + 2] * br[i + 2];
            r[3] += a[i + 3] * br[i + 3];
        }
    }
    let mut out = [0.0; 4];
    for ((o, r), br) in out.iter_mut().zip(&acc).zip(&b) {
        let mut tail = 0.0;
        for i in chunks * 4..n {
            tail += a[i] * br[i];
        }
        *o = (r[0] + r[1]) + (r[2] + r[3]) + tail;
    }
    out
}

/// Dot product with four fixed lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes `row` to zero mean and unit variance; returns `1/std`.
pub fn layer_norm_row(row: &[f64], out: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mean) * rstd;
    }
    rstd
}

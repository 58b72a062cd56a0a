//! Raw slice kernels shared by the tensor-level API and the autodiff graph.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `y[rows × dout] = x[rows × din] · w[din × dout] (+ b)`.
pub fn matmul_bias(
    x: &[f64],
    rows: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for i in 0..rows {
        let yi = &mut y[i * dout..(i + 1) * dout];
        if let Some(b) = b {
            yi.copy_from_slice(b);
        }
        let xi = &x[i * din..(i + 1) * din];
        for (p, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wp = &w[p * dout..(p + 1) * dout];
            for (yv, &wv) in yi.iter_mut().zip(wp) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Backward of [`matmul_bias`]: accumulates into the provided gradient buffers.
#[allow(clippy::too_many_arguments)]
pub fn matmul_bias_backward(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for i in 0..rows {
            let dyi = &dy[i * dout..(i + 1) * dout];
            for p in 0..din {
                let wp = &w[p * dout..(p + 1) * dout];
                dx[i * din + p] += dyi.iter().zip(wp).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    if let Some(dw) = dw {
        for i in 0..rows {
            let dyi = &dy[i * dout..(i + 1) * dout];
            for p in 0..din {
                let xv = x[i * din + p];
                if xv == 0.0 {
                    continue;
                }
                let dwp = &mut dw[p * dout..(p + 1) * dout];
                for (g, &d) in dwp.iter_mut().zip(dyi) {
                    *g += xv * d;
                }
            }
        }
    }
    if let Some(db) = db {
        for i in 0..rows {
            for (g, &d) in db.iter_mut().zip(&dy[i * dout..(i + 1) * dout]) {
                *g += d;
            }
        }
    }
}

/// Row-wise layer normalization. Returns `(y, xhat, inv_std)`.
pub fn layer_norm(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for i in 0..rows {
        let xi = &x[i * d..(i + 1) * d];
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for c in 0..d {
            let h = (xi[c] - mean) * is;
            xhat[i * d + c] = h;
            y[i * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    phi_cdf(x) + x * pdf
}

/// In-place softmax over each contiguous row of length `d`.
pub fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_mut(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

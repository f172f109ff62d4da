//! Forward and backward primitives for the encoder, all on flat f32
//! buffers with sequential f64 accumulation.

use tqsim_core::math::{gelu_grad_scalar, gelu_scalar};

pub const LAYERNORM_EPS: f64 = 1e-12;

/// `y (n, m) = x (n, k) · wᵀ (m, k) + b`, f64 accumulation per output.
pub fn linear_fwd(x: &[f32], n: usize, k: usize, w: &[f32], b: &[f32], m: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(b.len(), m);
    let mut y = vec![0.0f32; n * m];
    for r in 0..n {
        let xr = &x[r * k..(r + 1) * k];
        let yr = &mut y[r * m..(r + 1) * m];
        for i in 0..m {
            let wr = &w[i * k..(i + 1) * k];
            let mut acc = 0.0f64;
            for (&a, &c) in xr.iter().zip(wr.iter()) {
                acc += a as f64 * c as f64;
            }
            yr[i] = acc as f32 + b[i];
        }
    }
    y
}

/// Backward of [`linear_fwd`]: returns `dx`, accumulates `dw` and `db`.
pub fn linear_bwd(
    x: &[f32],
    n: usize,
    k: usize,
    w: &[f32],
    m: usize,
    dy: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
) -> Vec<f32> {
    debug_assert_eq!(dy.len(), n * m);
    let mut dx = vec![0.0f32; n * k];
    for r in 0..n {
        let dyr = &dy[r * m..(r + 1) * m];
        let xr = &x[r * k..(r + 1) * k];
        let dxr = &mut dx[r * k..(r + 1) * k];
        for i in 0..m {
            let g = dyr[i];
            db[i] += g;
            if g == 0.0 {
                continue;
            }
            let wrow = &w[i * k..(i + 1) * k];
            for (d, &wv) in dxr.iter_mut().zip(wrow.iter()) {
                *d += g * wv;
            }
            let dwrow = &mut dw[i * k..(i + 1) * k];
            for (d, &xv) in dwrow.iter_mut().zip(xr.iter()) {
                *d += g * xv;
            }
        }
    }
    dx
}

/// Per-row LayerNorm over the last axis. Returns the output together with
/// per-row mean and reciprocal standard deviation for the backward pass.
pub struct LnCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layernorm_fwd(
    x: &[f32],
    rows: usize,
    d: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, LnCache) {
    let mut y = vec![0.0f32; rows * d];
    let mut mean = vec![0.0f64; rows];
    let mut rstd = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut s = 0.0f64;
        for &v in row {
            s += v as f64;
        }
        let mu = s / d as f64;
        let mut sq = 0.0f64;
        for &v in row {
            let dv = v as f64 - mu;
            sq += dv * dv;
        }
        let var = sq / d as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] as f64 - mu) * rs;
            y[r * d + j] = (xh * gamma[j] as f64 + beta[j] as f64) as f32;
        }
    }
    (y, LnCache { mean, rstd })
}

pub fn layernorm_bwd(
    x: &[f32],
    rows: usize,
    d: usize,
    gamma: &[f32],
    cache: &LnCache,
    dy: &[f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mu = cache.mean[r];
        let rs = cache.rstd[r];
        let mut sum_dxh = 0.0f64;
        let mut sum_dxh_xh = 0.0f64;
        for j in 0..d {
            let xh = (row[j] as f64 - mu) * rs;
            let dxh = dyr[j] as f64 * gamma[j] as f64;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            dgamma[j] += (dyr[j] as f64 * xh) as f32;
            dbeta[j] += dyr[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let xh = (row[j] as f64 - mu) * rs;
            let dxh = dyr[j] as f64 * gamma[j] as f64;
            dx[r * d + j] = (rs * (dxh - inv_d * sum_dxh - xh * inv_d * sum_dxh_xh)) as f32;
        }
    }
    dx
}

/// Numerically stable softmax over the last axis with an additive mask:
/// `mask[row * n + j] == false` positions get probability zero. Rows with
/// no valid position fall back to uniform.
pub fn softmax_rows_masked(x: &[f32], rows: usize, n: usize, valid: impl Fn(usize, usize) -> bool) -> Vec<f32> {
    let mut p = vec![0.0f32; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..n {
            if valid(r, j) {
                hi = hi.max(row[j] as f64);
                any = true;
            }
        }
        let out = &mut p[r * n..(r + 1) * n];
        if !any {
            let u = 1.0 / n as f32;
            out.iter_mut().for_each(|v| *v = u);
            continue;
        }
        let mut z = 0.0f64;
        for j in 0..n {
            if valid(r, j) {
                z += ((row[j] as f64) - hi).exp();
            }
        }
        for j in 0..n {
            out[j] = if valid(r, j) {
                (((row[j] as f64) - hi).exp() / z) as f32
            } else {
                0.0
            };
        }
    }
    p
}

/// Backward of softmax: `dx = p * (dp - sum(dp * p))` per row. Masked
/// positions have `p = 0` and therefore zero gradient automatically.
pub fn softmax_bwd(p: &[f32], rows: usize, n: usize, dp: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * n];
    for r in 0..rows {
        let pr = &p[r * n..(r + 1) * n];
        let dpr = &dp[r * n..(r + 1) * n];
        let mut dot = 0.0f64;
        for j in 0..n {
            dot += pr[j] as f64 * dpr[j] as f64;
        }
        for j in 0..n {
            dx[r * n + j] = (pr[j] as f64 * (dpr[j] as f64 - dot)) as f32;
        }
    }
    dx
}

pub fn gelu_fwd(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| gelu_scalar(v as f64) as f32).collect()
}

pub fn gelu_bwd(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy.iter())
        .map(|(&v, &g)| (gelu_grad_scalar(v as f64) * g as f64) as f32)
        .collect()
}

pub fn tanh_fwd(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| (v as f64).tanh() as f32).collect()
}

pub fn tanh_bwd(y: &[f32], dy: &[f32]) -> Vec<f32> {
    y.iter()
        .zip(dy.iter())
        .map(|(&t, &g)| ((1.0 - (t as f64) * (t as f64)) * g as f64) as f32)
        .collect()
}

/// Mean cross-entropy over the batch; returns the loss and `dlogits`.
/// Evaluated fully in f64 so tiny loss differences stay meaningful.
pub fn cross_entropy(logits: &[f32], b: usize, c: usize, labels: &[u32]) -> (f64, Vec<f32>) {
    let mut loss = 0.0f64;
    let mut dl = vec![0.0f32; b * c];
    let inv_b = 1.0 / b as f64;
    for r in 0..b {
        let row = &logits[r * c..(r + 1) * c];
        let hi = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut z = 0.0f64;
        for &v in row {
            z += ((v as f64) - hi).exp();
        }
        let y = labels[r] as usize;
        loss -= ((row[y] as f64) - hi) - z.ln();
        for j in 0..c {
            let p = ((row[j] as f64) - hi).exp() / z;
            let indicator = if j == y { 1.0 } else { 0.0 };
            dl[r * c + j] = ((p - indicator) * inv_b) as f32;
        }
    }
    (loss * inv_b, dl)
}

/// One Adam update over a flat parameter buffer.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
        let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        param[i] = (param[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
    }
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero
/// at `total`.
pub fn lr_schedule(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

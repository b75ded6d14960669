//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xvit::attention::AttentionParams;
use xvit::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Plain triple loop, row-major.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * p + j];
            }
            c[i * p + j] = s;
        }
    }
    c
}

pub fn naive_transpose(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            t[j * m + i] = a[i * k + j];
        }
    }
    t
}

/// Dense cross-correlation with zero padding, `x: cin×h×w`, `w: cout×cin×k×k`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w[((co * cin + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_dwconv3x3(x: &[f64], w: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * wd];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        s += w[ch * 9 + ky * 3 + kx] * x[(ch * h + iy as usize) * wd + ix as usize];
                    }
                }
                out[(ch * h + y) * wd + xx] = s;
            }
        }
    }
    out
}

pub fn naive_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn naive_l2(v: &[f64], gamma: f64, eps: f64) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
    v.iter().map(|x| gamma * x / n).collect()
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Central difference of a scalar function of one tensor, at every entry.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub struct Proj {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn project(x: &Tensor, p: &AttentionParams) -> Proj {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    Proj {
        q: naive_matmul(x.data(), p.w_q.data(), n, c, c),
        k: naive_matmul(x.data(), p.w_k.data(), n, c, c),
        v: naive_matmul(x.data(), p.w_v.data(), n, c, c),
    }
}

/// Loops over heads, tokens and channels; forms both normalized factors explicitly.
pub fn oracle_xnorm(x: &Tensor, p: &AttentionParams) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = c / p.heads;
    let pr = project(x, p);
    let mut merged = vec![0.0; n * c];
    for h in 0..p.heads {
        let col = |m: &[f64], t: usize, i: usize| m[t * c + h * d + i];
        let mut ctx = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                for t in 0..n {
                    ctx[i * d + j] += col(&pr.k, t, i) * col(&pr.v, t, j);
                }
            }
        }
        let mut c_hat = vec![0.0; d * d];
        for i in 0..d {
            let row = naive_l2(&ctx[i * d..(i + 1) * d], p.gamma_c.data()[h], p.eps);
            c_hat[i * d..(i + 1) * d].copy_from_slice(&row);
        }
        for t in 0..n {
            let qrow: Vec<f64> = (0..d).map(|i| col(&pr.q, t, i)).collect();
            let q_hat = naive_l2(&qrow, p.gamma_q.data()[h], p.eps);
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..d {
                    s += q_hat[i] * c_hat[i * d + j];
                }
                merged[t * c + h * d + j] = s;
            }
        }
    }
    let out = naive_matmul(&merged, p.w_o.data(), n, c, c);
    (merged, out)
}

/// Scaled dot-product attention per head, one query row at a time.
pub fn oracle_softmax(x: &Tensor, p: &AttentionParams) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = c / p.heads;
    let pr = project(x, p);
    let mut merged = vec![0.0; n * c];
    for h in 0..p.heads {
        for t in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|s| {
                    (0..d).map(|i| pr.q[t * c + h * d + i] * pr.k[s * c + h * d + i]).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let probs = naive_softmax_row(&scores);
            for j in 0..d {
                merged[t * c + h * d + j] = (0..n).map(|s| probs[s] * pr.v[s * c + h * d + j]).sum();
            }
        }
    }
    naive_matmul(&merged, p.w_o.data(), n, c, c)
}

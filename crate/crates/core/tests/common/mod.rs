//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain nested loops over `f64` slices and
//! never calls into the library's kernels; `wired` is the exception.
#![allow(dead_code)]

pub mod wired;

use ragnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seeded(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect()
}

pub fn tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::from_vec(shape, seeded(shape, seed, -1.0, 1.0)).unwrap()
}

pub fn var(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::variable(shape, seeded(shape, seed, -1.0, 1.0)).unwrap()
}

pub fn var_in(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::variable(shape, seeded(shape, seed, lo, hi)).unwrap()
}

pub fn idx(s: [usize; 4], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * s[1] + c) * s[2] + h) * s[3] + w
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct-summation convolution with zero padding.
pub fn conv2d_ref(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let k = ws[2];
    let oh = (xs[2] + 2 * pad - k) / stride + 1;
    let ow = (xs[3] + 2 * pad - k) / stride + 1;
    let os = [xs[0], ws[0], oh, ow];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..xs[0] {
        for co in 0..ws[0] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..xs[1] {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs[2] as isize || ix >= xs[3] as isize {
                                    continue;
                                }
                                acc += w[idx(ws, co, ci, ky, kx)] * x[idx(xs, n, ci, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[idx(os, n, co, oy, ox)] = acc;
                }
            }
        }
    }
    (out, os)
}

/// Transposed stride-2 k=2 convolution computed as the adjoint of the
/// matching forward convolution: output = Σ over input pixels of scattered
/// kernel copies, evaluated by enumerating every (input, output) pair.
pub fn conv_transpose_ref(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64]) -> Vec<f64> {
    let (cin, cout) = (ws[0], ws[1]);
    let os = [xs[0], cout, 2 * xs[2], 2 * xs[3]];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..xs[0] {
        for co in 0..cout {
            for oy in 0..os[2] {
                for ox in 0..os[3] {
                    // y = Aᵀx where (A y)[ci,i,j] = Σ_{co,a,b} W[ci,co,a,b] y[co,2i+a,2j+b]
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for i in 0..xs[2] {
                            for j in 0..xs[3] {
                                for a in 0..2 {
                                    for bb in 0..2 {
                                        if 2 * i + a == oy && 2 * j + bb == ox {
                                            acc += w[idx(ws, ci, co, a, bb)] * x[idx(xs, n, ci, i, j)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out[idx(os, n, co, oy, ox)] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool_ref(x: &[f64], s: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] / 2 {
                for j in 0..s[3] / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..2 {
                            m = m.max(x[idx(s, n, c, 2 * i + a, 2 * j + b)]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn mask_mean_ref(m: &[f64], s: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] as isize {
                for j in 0..s[3] as isize {
                    let mut acc = 0.0;
                    for di in -1..=1 {
                        for dj in -1..=1 {
                            let (y, x) = (i + di, j + dj);
                            if y >= 0 && x >= 0 && y < s[2] as isize && x < s[3] as isize {
                                acc += m[idx(s, n, c, y as usize, x as usize)];
                            }
                        }
                    }
                    out[idx(s, n, c, i as usize, j as usize)] = acc / 9.0;
                }
            }
        }
    }
    out
}

/// Per-pixel partial convolution: (W * (F∘M)) / M̄ + b where M̄ > eps, else 0,
/// with M̄ the zero-padded 3×3 mean over all input channels.
pub fn partial_conv_ref(
    f: &[f64],
    m: &[f64],
    s: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    eps: f64,
) -> Vec<f64> {
    let os = [s[0], ws[0], s[2], s[3]];
    let mut out = vec![0.0; os.iter().product()];
    for n in 0..s[0] {
        for y in 0..s[2] as isize {
            for x in 0..s[3] as isize {
                let mut msum = 0.0;
                for ci in 0..s[1] {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && xx >= 0 && yy < s[2] as isize && xx < s[3] as isize {
                                msum += m[idx(s, n, ci, yy as usize, xx as usize)];
                            }
                        }
                    }
                }
                let mbar = msum / (9.0 * s[1] as f64);
                for co in 0..ws[0] {
                    if mbar <= eps {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ci in 0..s[1] {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (yy, xx) = (y + ky - 1, x + kx - 1);
                                if yy >= 0 && xx >= 0 && yy < s[2] as isize && xx < s[3] as isize {
                                    let k = idx(s, n, ci, yy as usize, xx as usize);
                                    acc += w[idx(ws, co, ci, ky as usize, kx as usize)] * f[k] * m[k];
                                }
                            }
                        }
                    }
                    out[idx(os, n, co, y as usize, x as usize)] = acc / mbar + b[co];
                }
            }
        }
    }
    out
}

pub fn downsample_ref(x: &[f64], s: [usize; 4], block: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] / block {
                for j in 0..s[3] / block {
                    let mut acc = 0.0;
                    for a in 0..block {
                        for b in 0..block {
                            acc += x[idx(s, n, c, block * i + a, block * j + b)];
                        }
                    }
                    out.push(acc / (block * block) as f64);
                }
            }
        }
    }
    out
}

/// Scripted exclusion loss on a single sample: three scales, forward
/// differences, λ_T = 1/2 and λ_R = ‖∇T‖₁/‖∇R‖₁ per scale.
pub fn exclusion_ref(t: &[f64], r: &[f64], s: [usize; 4]) -> f64 {
    assert_eq!(s[0], 1);
    let (mut t, mut r, mut s) = (t.to_vec(), r.to_vec(), s);
    let mut total = 0.0;
    for scale in 0..3 {
        if scale > 0 {
            t = downsample_ref(&t, s, 2);
            r = downsample_ref(&r, s, 2);
            s = [s[0], s[1], s[2] / 2, s[3] / 2];
        }
        let grads = |x: &[f64]| {
            let mut gx = vec![0.0; x.len()];
            let mut gy = vec![0.0; x.len()];
            for c in 0..s[1] {
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        let k = idx(s, 0, c, i, j);
                        if j + 1 < s[3] {
                            gx[k] = x[idx(s, 0, c, i, j + 1)] - x[k];
                        }
                        if i + 1 < s[2] {
                            gy[k] = x[idx(s, 0, c, i + 1, j)] - x[k];
                        }
                    }
                }
            }
            (gx, gy)
        };
        let (tx, ty) = grads(&t);
        let (rx, ry) = grads(&r);
        let l1 = |a: &[f64], b: &[f64]| a.iter().chain(b).map(|v| v.abs()).sum::<f64>();
        let (nt, nr) = (l1(&tx, &ty), l1(&rx, &ry));
        if nr < 1e-8 {
            continue;
        }
        let lam_r = nt / nr;
        let mut sq = 0.0;
        for k in 0..t.len() {
            let px = (0.5 * tx[k].abs()).tanh() * (lam_r * rx[k].abs()).tanh();
            let py = (0.5 * ty[k].abs()).tanh() * (lam_r * ry[k].abs()).tanh();
            sq += px * px + py * py;
        }
        total += sq.sqrt().sqrt();
    }
    total / 3.0
}

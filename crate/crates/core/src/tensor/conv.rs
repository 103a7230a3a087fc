//! Convolution, pooling and the mask-renormalization kernel.

use super::scalar::matmul;
use super::{Scalar, Shape, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample into a `(cin·k·k) × (oh·ow)` column matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, x: &mut [S]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<S: Scalar>(bias: Option<&Tensor<S>>, cout: usize, op: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape().numel() != cout {
            return Err(shape_err!(
                "{op}: bias has {} values, expected Cout = {cout}",
                b.shape().numel()
            ));
        }
    }
    Ok(())
}

/// 2-D convolution with zero padding. `weight` is `(Cout, Cin, k, k)` and
/// `bias`, when given, holds `Cout` values.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.h != ws.w {
        return Err(shape_err!("conv2d: kernel must be square, got {}x{}", ws.h, ws.w));
    }
    if ws.h.is_multiple_of(2) {
        return Err(shape_err!("conv2d: kernel size must be odd, got {}", ws.h));
    }
    if xs.c != ws.c {
        return Err(shape_err!(
            "conv2d: input channels {} do not match weight Cin {}",
            xs.c,
            ws.c
        ));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d: stride must be positive"));
    }
    let k = ws.h;
    if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
        return Err(shape_err!(
            "conv2d: padded input {}x{} smaller than kernel {k}",
            xs.h + 2 * pad,
            xs.w + 2 * pad
        ));
    }
    let cout = ws.n;
    check_bias(bias, cout, "conv2d")?;
    let g = ConvGeom {
        cin: xs.c,
        h: xs.h,
        w: xs.w,
        k,
        stride,
        pad,
        oh: (xs.h + 2 * pad - k) / stride + 1,
        ow: (xs.w + 2 * pad - k) / stride + 1,
    };
    let (kk, p) = (g.cols(), g.positions());
    let out_shape = Shape::new(xs.n, cout, g.oh, g.ow);
    let mut out = vec![S::zero(); out_shape.numel()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); kk * p]
    };
    let in_per = xs.c * xs.plane();
    for n in 0..xs.n {
        let x = &input.data()[n * in_per..(n + 1) * in_per];
        let cols: &[S] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        let y = &mut out[n * cout * p..(n + 1) * cout * p];
        matmul(cout, kk, p, weight.data(), false, cols, false, y, false);
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::op_result(
        out_shape,
        out,
        parents,
        Box::new(move |ctx| {
            let (x_t, w_t) = (&ctx.parents[0], &ctx.parents[1]);
            let need_x = x_t.requires_grad();
            let need_w = w_t.requires_grad();
            let mut gx = need_x.then(|| vec![S::zero(); xs.numel()]);
            let mut gw = need_w.then(|| vec![S::zero(); ws.numel()]);
            let mut col = vec![S::zero(); kk * p];
            let mut gcol = vec![S::zero(); kk * p];
            for n in 0..xs.n {
                let gy = &ctx.grad[n * cout * p..(n + 1) * cout * p];
                let x = &x_t.data()[n * in_per..(n + 1) * in_per];
                if let Some(gw) = gw.as_mut() {
                    let cols: &[S] = if g.is_pointwise() {
                        x
                    } else {
                        im2col(x, &g, &mut col);
                        &col
                    };
                    // gW (cout × kk) += gY (cout × p) · colsᵀ
                    matmul(cout, p, kk, gy, false, cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[n * in_per..(n + 1) * in_per];
                    if g.is_pointwise() {
                        matmul(kk, cout, p, w_t.data(), true, gy, false, dst, true);
                    } else {
                        matmul(kk, cout, p, w_t.data(), true, gy, false, &mut gcol, false);
                        col2im(&gcol, &g, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                let gb = ctx.parents[2].requires_grad().then(|| {
                    let mut gb = vec![S::zero(); cout];
                    for n in 0..xs.n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let base = (n * cout + co) * p;
                            *acc += ctx.grad[base..base + p].iter().copied().sum::<S>();
                        }
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// Transposed convolution with kernel 2 and stride 2; `weight` is
/// `(Cin, Cout, 2, 2)`. Output spatial size is exactly double the input.
pub fn conv_transpose2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let xs = input.shape();
    let ws = weight.shape();
    if ws.h != 2 || ws.w != 2 {
        return Err(shape_err!(
            "conv_transpose2d: only 2x2 stride-2 kernels are supported, got {}x{}",
            ws.h,
            ws.w
        ));
    }
    if xs.c != ws.n {
        return Err(shape_err!(
            "conv_transpose2d: input channels {} do not match weight Cin {}",
            xs.c,
            ws.n
        ));
    }
    let (cin, cout) = (ws.n, ws.c);
    check_bias(bias, cout, "conv_transpose2d")?;
    let (h, w) = (xs.h, xs.w);
    let p = h * w;
    let q = cout * 4;
    let out_shape = Shape::new(xs.n, cout, 2 * h, 2 * w);
    let mut out = vec![S::zero(); out_shape.numel()];
    let mut y = vec![S::zero(); q * p];
    let out_per = cout * 4 * p;
    for n in 0..xs.n {
        let x = &input.data()[n * cin * p..(n + 1) * cin * p];
        // Y (q × p) = Wᵀ (q × cin) · X (cin × p), W stored cin × q.
        matmul(q, cin, p, weight.data(), true, x, false, &mut y, false);
        let o = &mut out[n * out_per..(n + 1) * out_per];
        for co in 0..cout {
            let bv = bias.map_or(S::zero(), |b| b.data()[co]);
            for a in 0..2 {
                for b in 0..2 {
                    let row = &y[((co * 2 + a) * 2 + b) * p..((co * 2 + a) * 2 + b + 1) * p];
                    for i in 0..h {
                        for j in 0..w {
                            o[(co * 2 * h + 2 * i + a) * 2 * w + 2 * j + b] = row[i * w + j] + bv;
                        }
                    }
                }
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::op_result(
        out_shape,
        out,
        parents,
        Box::new(move |ctx| {
            let (x_t, w_t) = (&ctx.parents[0], &ctx.parents[1]);
            let mut gx = x_t.requires_grad().then(|| vec![S::zero(); xs.numel()]);
            let mut gw = w_t.requires_grad().then(|| vec![S::zero(); ws.numel()]);
            let mut gb = (ctx.parents.len() == 3 && ctx.parents[2].requires_grad()).then(|| vec![S::zero(); cout]);
            let mut gy = vec![S::zero(); q * p];
            for n in 0..xs.n {
                let go = &ctx.grad[n * out_per..(n + 1) * out_per];
                for co in 0..cout {
                    for a in 0..2 {
                        for b in 0..2 {
                            let row = ((co * 2 + a) * 2 + b) * p;
                            for i in 0..h {
                                for j in 0..w {
                                    let v = go[(co * 2 * h + 2 * i + a) * 2 * w + 2 * j + b];
                                    gy[row + i * w + j] = v;
                                }
                            }
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[co] += gy[co * 4 * p..(co + 1) * 4 * p].iter().copied().sum::<S>();
                    }
                }
                let x = &x_t.data()[n * cin * p..(n + 1) * cin * p];
                if let Some(gx) = gx.as_mut() {
                    // gX (cin × p) = W (cin × q) · gY (q × p)
                    let dst = &mut gx[n * cin * p..(n + 1) * cin * p];
                    matmul(cin, q, p, w_t.data(), false, &gy, false, dst, true);
                }
                if let Some(gw) = gw.as_mut() {
                    // gW (cin × q) += X (cin × p) · gYᵀ
                    matmul(cin, p, q, x, false, &gy, true, gw, true);
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.parents.len() == 3 {
                grads.push(gb);
            }
            grads
        }),
    ))
}

fn check_even(op: &str, s: Shape) -> Result<()> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(shape_err!("{op}: H and W must be even, got {s}"));
    }
    Ok(())
}

/// 2×2 max pooling, stride 2. Ties go to the first element in row-major order.
pub fn maxpool2x2<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let s = input.shape();
    check_even("maxpool2x2", s)?;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let d = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * s.w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * s.w + 2 * j + dj;
                    if d[k] > d[best] {
                        best = k;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok(Tensor::op_result(
        out_shape,
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            let mut g = vec![S::zero(); s.numel()];
            for (&k, &gv) in arg.iter().zip(ctx.grad) {
                g[k] += gv;
            }
            vec![Some(g)]
        }),
    ))
}

/// 2×2 average pooling, stride 2.
pub fn downsample2x<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let s = input.shape();
    check_even("downsample2x", s)?;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let quarter = S::from_f64(0.25);
    let d = input.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for i in 0..oh {
            for j in 0..ow {
                let k = base + 2 * i * s.w + 2 * j;
                out.push((d[k] + d[k + 1] + d[k + s.w] + d[k + s.w + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::op_result(
        out_shape,
        out,
        vec![input.clone()],
        Box::new(move |ctx| {
            let mut g = vec![S::zero(); s.numel()];
            let mut idx = 0;
            for plane in 0..s.n * s.c {
                let base = plane * s.h * s.w;
                for i in 0..oh {
                    for j in 0..ow {
                        let k = base + 2 * i * s.w + 2 * j;
                        let gv = ctx.grad[idx] * quarter;
                        idx += 1;
                        g[k] += gv;
                        g[k + 1] += gv;
                        g[k + s.w] += gv;
                        g[k + s.w + 1] += gv;
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Sums each 3×3 zero-padded neighbourhood of every plane.
fn box3x3<S: Scalar>(d: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let mut out = vec![S::zero(); d.len()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            let i0 = i.saturating_sub(1);
            let i1 = (i + 1).min(h - 1);
            for j in 0..w {
                let j0 = j.saturating_sub(1);
                let j1 = (j + 1).min(w - 1);
                let mut acc = S::zero();
                for ii in i0..=i1 {
                    for jj in j0..=j1 {
                        acc += d[base + ii * w + jj];
                    }
                }
                out[base + i * w + j] = acc;
            }
        }
    }
    out
}

/// 3×3 average of a mask with zero padding and a fixed divisor of 9, so
/// border values are attenuated.
pub fn mask_mean3x3<S: Scalar>(mask: &Tensor<S>) -> Result<Tensor<S>> {
    let s = mask.shape();
    if s.numel() == 0 {
        return Err(shape_err!("mask_mean3x3: empty tensor {s}"));
    }
    let ninth = S::one() / S::from_f64(9.0);
    let planes = s.n * s.c;
    let mut out = box3x3(mask.data(), planes, s.h, s.w);
    out.iter_mut().for_each(|v| *v *= ninth);
    Ok(Tensor::op_result(
        s,
        out,
        vec![mask.clone()],
        Box::new(move |ctx| {
            // The zero-padded box filter is self-adjoint.
            let mut g = box3x3(ctx.grad, planes, s.h, s.w);
            g.iter_mut().for_each(|v| *v *= ninth);
            vec![Some(g)]
        }),
    ))
}

/// Partial-convolution output stage: `conv / mbar + b` where `mbar > eps`,
/// else `0` (bias included). `mbar` is a single-channel `(N,1,H,W)` map
/// shared by all output channels.
pub fn renormalize<S: Scalar>(conv: &Tensor<S>, mbar: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let cs = conv.shape();
    let ms = mbar.shape();
    if ms.n != cs.n || ms.c != 1 || ms.h != cs.h || ms.w != cs.w {
        return Err(shape_err!(
            "renormalize: mask mean {ms} must be (N,1,H,W) for conv output {cs}"
        ));
    }
    check_bias(Some(bias), cs.c, "renormalize")?;
    let eps = S::from_f64(eps);
    let plane = cs.plane();
    let mut out = vec![S::zero(); cs.numel()];
    for n in 0..cs.n {
        let m = &mbar.data()[n * plane..(n + 1) * plane];
        for c in 0..cs.c {
            let bv = bias.data()[c];
            let base = (n * cs.c + c) * plane;
            for (k, &mv) in m.iter().enumerate() {
                if mv > eps {
                    out[base + k] = conv.data()[base + k] / mv + bv;
                }
            }
        }
    }
    Ok(Tensor::op_result(
        cs,
        out,
        vec![conv.clone(), mbar.clone(), bias.clone()],
        Box::new(move |ctx| {
            let (conv, mbar) = (&ctx.parents[0], &ctx.parents[1]);
            let mut gc = vec![S::zero(); cs.numel()];
            let mut gm = vec![S::zero(); ms.numel()];
            let mut gb = vec![S::zero(); cs.c];
            for n in 0..cs.n {
                let m = &mbar.data()[n * plane..(n + 1) * plane];
                for (c, gbc) in gb.iter_mut().enumerate() {
                    let base = (n * cs.c + c) * plane;
                    for (k, &mv) in m.iter().enumerate() {
                        if mv > eps {
                            let g = ctx.grad[base + k];
                            gc[base + k] = g / mv;
                            gm[n * plane + k] -= g * conv.data()[base + k] / (mv * mv);
                            *gbc += g;
                        }
                    }
                }
            }
            vec![Some(gc), Some(gm), Some(gb)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_ones() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::from_vec([1, 1, 3, 3], w).unwrap();
        let y = conv2d(&x, &w, Some(&Tensor::zeros([1, 1, 1, 1])), 1, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::from_vec([5, 2, 3, 3], (0..90).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = conv2d(&x, &w, Some(&Tensor::zeros([1, 5, 1, 1])), 1, 1).unwrap();
        assert_eq!(y.shape().c, 5);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_shape_errors() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros([1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let even = Tensor::<f64>::zeros([1, 2, 2, 2]);
        assert!(conv2d(&x, &even, None, 1, 0).is_err());
        let w = Tensor::<f64>::zeros([4, 2, 3, 3]);
        assert!(conv2d(&x, &w, Some(&Tensor::zeros([1, 3, 1, 1])), 1, 1).is_err());
    }

    #[test]
    fn conv2d_output_size_with_stride() {
        let x = Tensor::<f64>::zeros([1, 1, 7, 6]);
        let w = Tensor::<f64>::zeros([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (4, 3));
    }

    #[test]
    fn transposed_conv_tiles_blocks() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::ones([1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, Some(&Tensor::zeros([1, 1, 1, 1]))).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.at(0, 0, i, j), x.at(0, 0, i / 2, j / 2));
            }
        }
        let z = conv_transpose2d(&Tensor::<f64>::zeros([1, 1, 2, 2]), &w, None).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(conv_transpose2d(&x, &Tensor::<f64>::ones([1, 1, 3, 3]), None).is_err());
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::variable([1, 1, 2, 2], vec![0.5; 4]).unwrap();
        let y = maxpool2x2(&c).unwrap();
        assert_eq!(y.data(), &[0.5]);
        y.sum().backward().unwrap();
        assert_eq!(c.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(maxpool2x2(&Tensor::<f64>::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn downsample_mean() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(downsample2x(&x).unwrap().data(), &[3.0]);
        let c = downsample2x(&Tensor::<f64>::full([1, 2, 4, 4], 0.7)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(downsample2x(&Tensor::<f64>::zeros([1, 1, 2, 3])).is_err());
    }

    #[test]
    fn mask_mean_of_ones() {
        let m = mask_mean3x3(&Tensor::<f64>::ones([1, 1, 5, 5])).unwrap();
        assert_eq!(m.at(0, 0, 2, 2), 1.0);
        assert!((m.at(0, 0, 0, 2) - 6.0 / 9.0).abs() < 1e-15);
        assert!((m.at(0, 0, 0, 0) - 4.0 / 9.0).abs() < 1e-15);
        let z = mask_mean3x3(&Tensor::<f64>::zeros([1, 1, 5, 5])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn renormalize_zero_branch_suppresses_bias() {
        let conv = Tensor::<f64>::full([1, 2, 2, 2], 3.0);
        let mbar = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![0.5, -1.0]).unwrap();
        let y = renormalize(&conv, &mbar, &b, 1e-8).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

use super::{Scalar, Shape, Tensor};
use crate::error::{shape_err, Result};

/// Pointwise operations. Binary forms require identical shapes; the only
/// broadcast is tensor × scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    ScalarMul(f64),
    AddScalar(f64),
    Clamp01,
    /// Natural log of the input clamped to `[lo, hi]`; zero gradient outside.
    LnClamped(f64, f64),
}

impl ElementwiseOp {
    pub fn apply<S: Scalar>(self, args: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let want = match self {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if args.len() != want {
            return Err(shape_err!("{self:?} takes {want} operand(s), got {}", args.len()));
        }
        let x = args[0];
        Ok(match self {
            ElementwiseOp::Add => x.add(args[1])?,
            ElementwiseOp::Sub => x.sub(args[1])?,
            ElementwiseOp::Mul => x.mul(args[1])?,
            ElementwiseOp::Relu => x.relu(),
            ElementwiseOp::LeakyRelu(s) => x.leaky_relu(s),
            ElementwiseOp::Sigmoid => x.sigmoid(),
            ElementwiseOp::Tanh => x.tanh(),
            ElementwiseOp::Abs => x.abs(),
            ElementwiseOp::Sqrt => x.sqrt(),
            ElementwiseOp::ScalarMul(s) => x.scale(s),
            ElementwiseOp::AddScalar(s) => x.add_scalar(s),
            ElementwiseOp::Clamp01 => x.clamp01(),
            ElementwiseOp::LnClamped(lo, hi) => x.ln_clamped(lo, hi),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    L1Norm,
    FrobeniusNorm,
}

impl ReduceOp {
    pub fn apply<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            ReduceOp::Sum => x.sum(),
            ReduceOp::Mean => x.mean(),
            ReduceOp::L1Norm => x.l1_norm(),
            ReduceOp::FrobeniusNorm => x.frobenius_norm(),
        }
    }
}

fn check_same(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(shape_err!("{op}: operand shapes differ, {a} vs {b}"));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    /// Pointwise map with derivative `df(x, y)` evaluated from input and output.
    fn unary(&self, f: impl Fn(S) -> S, df: impl Fn(S, S) -> S + Send + Sync + 'static) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::op_result(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let g = x
                    .iter()
                    .zip(ctx.out)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same("add", self.shape(), other.shape())?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::op_result(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same("sub", self.shape(), other.shape())?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::op_result(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|&g| -g).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same("mul", self.shape(), other.shape())?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::op_result(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let ga = a
                    .requires_grad()
                    .then(|| ctx.grad.iter().zip(b.data()).map(|(&g, &b)| g * b).collect());
                let gb = b
                    .requires_grad()
                    .then(|| ctx.grad.iter().zip(a.data()).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor<S> {
        self.unary(
            |x| if x > S::zero() { x } else { S::zero() },
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<S> {
        let s = S::from_f64(slope);
        self.unary(
            move |x| if x > S::zero() { x } else { s * x },
            move |x, _| if x > S::zero() { S::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary(
            |x| {
                // Split on sign so exp never overflows.
                if x >= S::zero() {
                    S::one() / (S::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            },
            |_, y| y * (S::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary(|x| x.tanh(), |_, y| S::one() - y * y)
    }

    /// Subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<S> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Gradient at zero is zero.
    pub fn sqrt(&self) -> Tensor<S> {
        self.unary(
            |x| x.max(S::zero()).sqrt(),
            |_, y| {
                if y > S::zero() {
                    S::one() / (y + y)
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor<S> {
        let k = S::from_f64(factor);
        self.unary(move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(&self, value: f64) -> Tensor<S> {
        let k = S::from_f64(value);
        self.unary(move |x| x + k, |_, _| S::one())
    }

    pub fn clamp01(&self) -> Tensor<S> {
        self.unary(
            |x| x.max(S::zero()).min(S::one()),
            |x, _| {
                if x >= S::zero() && x <= S::one() {
                    S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn ln_clamped(&self, lo: f64, hi: f64) -> Tensor<S> {
        let (lo, hi) = (S::from_f64(lo), S::from_f64(hi));
        self.unary(
            move |x| x.max(lo).min(hi).ln(),
            move |x, _| {
                if x >= lo && x <= hi {
                    S::one() / x
                } else {
                    S::zero()
                }
            },
        )
    }

    fn reduce_to_scalar(&self, value: S, dvalue: impl Fn(S, S) -> S + Send + Sync + 'static) -> Tensor<S> {
        Tensor::op_result(
            Shape::SCALAR,
            vec![value],
            vec![self.clone()],
            Box::new(move |ctx| {
                let (g, y) = (ctx.grad[0], ctx.out[0]);
                vec![Some(ctx.parents[0].data().iter().map(|&x| g * dvalue(x, y)).collect())]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<S> {
        let v = self.data().iter().copied().sum();
        self.reduce_to_scalar(v, |_, _| S::one())
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = S::from_usize(self.shape().numel().max(1));
        let v = self.data().iter().copied().sum::<S>() / n;
        self.reduce_to_scalar(v, move |_, _| S::one() / n)
    }

    pub fn l1_norm(&self) -> Tensor<S> {
        let v = self.data().iter().map(|x| x.abs()).sum();
        self.reduce_to_scalar(v, |x, _| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        })
    }

    /// Gradient at the zero tensor is zero.
    pub fn frobenius_norm(&self) -> Tensor<S> {
        let v = self.data().iter().map(|&x| x * x).sum::<S>().sqrt();
        self.reduce_to_scalar(v, |x, y| if y > S::zero() { x / y } else { S::zero() })
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if start + len > s.c {
            return Err(shape_err!(
                "slice_channels: range {start}..{} exceeds {} channels",
                start + len,
                s.c
            ));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data()[base..base + len * plane]);
        }
        Ok(Tensor::op_result(
            s.with_c(len),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); s.numel()];
                for n in 0..s.n {
                    let dst = (n * s.c + start) * plane;
                    let src = n * len * plane;
                    g[dst..dst + len * plane].copy_from_slice(&ctx.grad[src..src + len * plane]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Sample `index` of the batch, as a batch of one.
    pub fn select_batch(&self, index: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if index >= s.n {
            return Err(shape_err!("select_batch: index {index} out of batch {}", s.n));
        }
        let per = s.c * s.plane();
        let data = self.data()[index * per..(index + 1) * per].to_vec();
        Ok(Tensor::op_result(
            s.with_n(1),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); s.numel()];
                g[index * per..(index + 1) * per].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        ))
    }

    /// Repeats a single-channel map across `c` channels.
    pub fn expand_channels(&self, c: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.c != 1 {
            return Err(shape_err!("expand_channels: expected 1 channel, got {}", s.c));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * c * plane);
        for n in 0..s.n {
            let src = &self.data()[n * plane..(n + 1) * plane];
            for _ in 0..c {
                data.extend_from_slice(src);
            }
        }
        Ok(Tensor::op_result(
            s.with_c(c),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); s.numel()];
                for n in 0..s.n {
                    for ch in 0..c {
                        let src = &ctx.grad[(n * c + ch) * plane..(n * c + ch + 1) * plane];
                        g[n * plane..(n + 1) * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean over channels, producing `(N,1,H,W)`.
    pub fn channel_mean(&self) -> Tensor<S> {
        let s = self.shape();
        let plane = s.plane();
        let inv = S::one() / S::from_usize(s.c.max(1));
        let mut data = vec![S::zero(); s.n * plane];
        for n in 0..s.n {
            for c in 0..s.c {
                let src = &self.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                data[n * plane..(n + 1) * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        Tensor::op_result(
            s.with_c(1),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![S::zero(); s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        g[(n * s.c + c) * plane..(n * s.c + c + 1) * plane]
                            .iter_mut()
                            .zip(&ctx.grad[n * plane..(n + 1) * plane])
                            .for_each(|(a, &b)| *a = b * inv);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean over the spatial plane, producing `(N,C,1,1)`.
    pub fn spatial_mean(&self) -> Tensor<S> {
        let s = self.shape();
        let plane = s.plane();
        let inv = S::one() / S::from_usize(plane.max(1));
        let data = self
            .data()
            .chunks(plane.max(1))
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        Tensor::op_result(
            Shape::new(s.n, s.c, 1, 1),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(s.numel());
                for &gv in ctx.grad {
                    g.extend(std::iter::repeat_n(gv * inv, plane));
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(shape_err!("concat_channels: N/H/W must match, got {sa} and {sb}"));
    }
    let plane = sa.plane();
    let (ca, cb) = (sa.c * plane, sb.c * plane);
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * ca..(n + 1) * ca]);
        data.extend_from_slice(&b.data()[n * cb..(n + 1) * cb]);
    }
    let out_shape = sa.with_c(sa.c + sb.c);
    Ok(Tensor::op_result(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let mut ga = Vec::with_capacity(sa.numel());
            let mut gb = Vec::with_capacity(sb.numel());
            for n in 0..sa.n {
                let base = n * (ca + cb);
                ga.extend_from_slice(&ctx.grad[base..base + ca]);
                gb.extend_from_slice(&ctx.grad[base + ca..base + ca + cb]);
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Stacks tensors along the batch axis.
pub fn concat_batch<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat_batch: no tensors"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.c != first.c || s.h != first.h || s.w != first.w {
            return Err(shape_err!("concat_batch: C/H/W must match, got {first} and {s}"));
        }
    }
    let n: usize = parts.iter().map(|p| p.shape().n).sum();
    let mut data = Vec::with_capacity(n * first.c * first.plane());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.data().len()).collect();
    Ok(Tensor::op_result(
        first.with_n(n),
        data,
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&len| {
                    let g = ctx.grad[off..off + len].to_vec();
                    off += len;
                    Some(g)
                })
                .collect()
        }),
    ))
}

/// Forward differences along width (`gx`) and height (`gy`); the last
/// column of `gx` and last row of `gy` are zero.
pub fn spatial_gradient<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(shape_err!("spatial_gradient needs H >= 2 and W >= 2, got {s}"));
    }
    let (h, w) = (s.h, s.w);
    let planes = s.n * s.c;
    let d = x.data();
    let mut gx = vec![S::zero(); s.numel()];
    let mut gy = vec![S::zero(); s.numel()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let k = base + i * w + j;
                if j + 1 < w {
                    gx[k] = d[k + 1] - d[k];
                }
                if i + 1 < h {
                    gy[k] = d[k + w] - d[k];
                }
            }
        }
    }
    let tx = Tensor::op_result(
        s,
        gx,
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut g = vec![S::zero(); s.numel()];
            for p in 0..planes {
                let base = p * h * w;
                for i in 0..h {
                    for j in 0..w - 1 {
                        let k = base + i * w + j;
                        g[k + 1] += ctx.grad[k];
                        g[k] -= ctx.grad[k];
                    }
                }
            }
            vec![Some(g)]
        }),
    );
    let ty = Tensor::op_result(
        s,
        gy,
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut g = vec![S::zero(); s.numel()];
            for p in 0..planes {
                let base = p * h * w;
                for i in 0..h - 1 {
                    for j in 0..w {
                        let k = base + i * w + j;
                        g[k + w] += ctx.grad[k];
                        g[k] -= ctx.grad[k];
                    }
                }
            }
            vec![Some(g)]
        }),
    );
    Ok((tx, ty))
}

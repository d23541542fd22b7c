//! Vector-Jacobian products for every differentiable kernel.
//!
//! Subgradient conventions: activation kinks take derivative 0 and max-pool
//! ties route the cotangent to the first maximal element in the window.

use rayon::prelude::*;

use super::ops::{check_bias, transpose_conv_shape, valid_range};
use super::{
    batchnorm2d, invalid, maxpool2x2, mismatch, softmax_channels, ActivationKind, BatchNormParams,
    BatchNormSaved, ConvParams, Result, Scalar, Shape, Tensor,
};

fn check_cotangent(op: &'static str, expected: Shape, got: Shape) -> Result<()> {
    if expected != got {
        return Err(mismatch(
            op,
            "cotangent",
            format!("cotangent {got} does not match output {expected}"),
        ));
    }
    Ok(())
}

/// Cotangents of a convolution-like op.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_vjp<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    p: ConvParams,
    cot: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let ishape = input.shape();
    let wshape = weights.shape();
    let oshape = p.output_shape(ishape, wshape)?;
    check_cotangent("conv2d", oshape, cot.shape())?;

    let (kh, kw) = p.kernel;
    let (s, pad) = (p.stride, p.padding);
    let cin_g = wshape.c;
    let cout_g = oshape.c / p.groups;
    let (ih, iw, oh, ow) = (ishape.h, ishape.w, oshape.h, oshape.w);
    let (iplane, oplane) = (ishape.plane(), oshape.plane());
    let x = input.data();
    let wt = weights.data();
    let dy = cot.data();

    // Input cotangent, one input plane per task.
    let mut dx = vec![T::zero(); ishape.numel()];
    if iplane > 0 {
        dx.par_chunks_mut(iplane).enumerate().for_each(|(plane_idx, dst)| {
            let n = plane_idx / ishape.c;
            let ic = plane_idx % ishape.c;
            let g = ic / cin_g;
            let icl = ic % cin_g;
            for ocl in 0..cout_g {
                let oc = g * cout_g + ocl;
                let src = &dy[(n * oshape.c + oc) * oplane..][..oplane];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ih, oh, ky, s, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(iw, ow, kx, s, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let wv = wt[((oc * cin_g + icl) * kh + ky) * kw + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - pad;
                                dst[iy * iw + ix] = dst[iy * iw + ix] + wv * src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
    }

    // Weight cotangent, one output channel's filter per task.
    let filter = cin_g * kh * kw;
    let mut dw = vec![T::zero(); wshape.numel()];
    if filter > 0 {
        dw.par_chunks_mut(filter).enumerate().for_each(|(oc, dst)| {
            let g = oc / cout_g;
            for n in 0..ishape.n {
                let grad = &dy[(n * oshape.c + oc) * oplane..][..oplane];
                for icl in 0..cin_g {
                    let ic = g * cin_g + icl;
                    let src = &x[(n * ishape.c + ic) * iplane..][..iplane];
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_range(ih, oh, ky, s, pad);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = valid_range(iw, ow, kx, s, pad);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - pad;
                                for ox in ox_lo..ox_hi {
                                    acc = acc + grad[oy * ow + ox] * src[iy * iw + ox * s + kx - pad];
                                }
                            }
                            let slot = &mut dst[(icl * kh + ky) * kw + kx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });
    }

    let db = has_bias.then(|| channel_sums(cot));
    Ok(ConvGrads {
        input: Tensor::from_vec(ishape, dx)?,
        weights: Tensor::from_vec(wshape, dw)?,
        bias: db,
    })
}

/// Sum over `(N, H, W)` per channel.
pub fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    let mut out = vec![T::zero(); s.c];
    if s.plane() == 0 {
        return out;
    }
    for (i, plane) in t.data().chunks(s.plane()).enumerate() {
        out[i % s.c] = out[i % s.c] + plane.iter().copied().sum::<T>();
    }
    out
}

pub fn transpose_conv2x2_vjp<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    cot: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let ishape = input.shape();
    let wshape = weights.shape();
    let oshape = transpose_conv_shape(ishape, wshape)?;
    check_cotangent("transpose_conv2x2", oshape, cot.shape())?;
    let (h, w, ow, cout) = (ishape.h, ishape.w, oshape.w, oshape.c);
    let (iplane, oplane) = (ishape.plane(), oshape.plane());
    let x = input.data();
    let wt = weights.data();
    let dy = cot.data();

    let mut dx = vec![T::zero(); ishape.numel()];
    if iplane > 0 {
        dx.par_chunks_mut(iplane).enumerate().for_each(|(plane_idx, dst)| {
            let n = plane_idx / ishape.c;
            let ic = plane_idx % ishape.c;
            for oc in 0..cout {
                let k = &wt[(ic * cout + oc) * 4..][..4];
                let g = &dy[(n * cout + oc) * oplane..][..oplane];
                for y in 0..h {
                    for xx in 0..w {
                        let top = 2 * y * ow + 2 * xx;
                        let bot = top + ow;
                        let v = g[top] * k[0] + g[top + 1] * k[1] + g[bot] * k[2] + g[bot + 1] * k[3];
                        dst[y * w + xx] = dst[y * w + xx] + v;
                    }
                }
            }
        });
    }

    let mut dw = vec![T::zero(); wshape.numel()];
    dw.par_chunks_mut(4).enumerate().for_each(|(idx, dst)| {
        let ic = idx / cout;
        let oc = idx % cout;
        for n in 0..ishape.n {
            let src = &x[(n * ishape.c + ic) * iplane..][..iplane];
            let g = &dy[(n * cout + oc) * oplane..][..oplane];
            let mut acc = [T::zero(); 4];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let top = 2 * y * ow + 2 * xx;
                    let bot = top + ow;
                    acc[0] = acc[0] + v * g[top];
                    acc[1] = acc[1] + v * g[top + 1];
                    acc[2] = acc[2] + v * g[bot];
                    acc[3] = acc[3] + v * g[bot + 1];
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = *d + a;
            }
        }
    });

    let db = has_bias.then(|| channel_sums(cot));
    Ok(ConvGrads {
        input: Tensor::from_vec(ishape, dx)?,
        weights: Tensor::from_vec(wshape, dw)?,
        bias: db,
    })
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of [`batchnorm2d`] given the statistics its forward pass saved.
/// In training mode the batch mean and variance depend on the input and
/// contribute to its cotangent; with running statistics they are constants.
pub fn batchnorm2d_vjp<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    saved: &BatchNormSaved<T>,
    cot: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let shape = input.shape();
    check_cotangent("batchnorm2d", shape, cot.shape())?;
    if gamma.len() != shape.c || saved.mean.len() != shape.c || saved.inv_std.len() != shape.c {
        return Err(mismatch("batchnorm2d", "C", "parameter vectors do not match channels"));
    }
    let (n, c, plane) = (shape.n, shape.c, shape.plane());
    let x = input.data();
    let dy = cot.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (m, is) = (saved.mean[ch], saved.inv_std[ch]);
            for i in base..base + plane {
                dbeta[ch] = dbeta[ch] + dy[i];
                dgamma[ch] = dgamma[ch] + dy[i] * (x[i] - m) * is;
            }
        }
    }
    let mut dx = vec![T::zero(); shape.numel()];
    if saved.training {
        let count = T::from_usize(n * plane).unwrap();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (m, is) = (saved.mean[ch], saved.inv_std[ch]);
                let k = gamma[ch] * is / count;
                for i in base..base + plane {
                    let xhat = (x[i] - m) * is;
                    dx[i] = k * (count * dy[i] - dbeta[ch] - xhat * dgamma[ch]);
                }
            }
        }
    } else {
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let k = gamma[ch] * saved.inv_std[ch];
                for i in base..base + plane {
                    dx[i] = k * dy[i];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_vec(shape, dx)?,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn activation_vjp<T: Scalar>(input: &Tensor<T>, kind: ActivationKind, cot: &Tensor<T>) -> Result<Tensor<T>> {
    check_cotangent("activation", input.shape(), cot.shape())?;
    let data = input
        .data()
        .iter()
        .zip(cot.data())
        .map(|(&x, &g)| g * kind.derivative(x))
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Routes each output cotangent to the input element recorded in `argmax`.
pub fn maxpool2x2_vjp<T: Scalar>(input_shape: Shape, argmax: &[usize], cot: &Tensor<T>) -> Result<Tensor<T>> {
    let oshape = Shape::new(input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2);
    check_cotangent("maxpool2x2", oshape, cot.shape())?;
    if argmax.len() != oshape.numel() {
        return Err(mismatch("maxpool2x2", "argmax", "argmax length does not match output"));
    }
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (&idx, &g) in argmax.iter().zip(cot.data()) {
        dx[idx] = dx[idx] + g;
    }
    Tensor::from_vec(input_shape, dx)
}

pub fn global_avg_pool_vjp<T: Scalar>(input_shape: Shape, cot: &Tensor<T>) -> Result<Tensor<T>> {
    check_cotangent(
        "global_avg_pool",
        Shape::new(input_shape.n, input_shape.c, 1, 1),
        cot.shape(),
    )?;
    let plane = input_shape.plane();
    let denom = T::from_usize(plane).unwrap();
    let mut dx = Vec::with_capacity(input_shape.numel());
    for &g in cot.data() {
        dx.extend(std::iter::repeat_n(g / denom, plane));
    }
    Tensor::from_vec(input_shape, dx)
}

/// Splits a concat cotangent back into the `a` and `b` parts.
pub fn concat_channels_vjp<T: Scalar>(a_channels: usize, cot: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = cot.shape().c;
    if a_channels > c {
        return Err(mismatch("concat_channels", "C", format!("{a_channels} > {c}")));
    }
    Ok((cot.slice_channels(0, a_channels)?, cot.slice_channels(a_channels, c)?))
}

/// Backward of softmax from its output `probs`: `s * (g - <g, s>)` per pixel.
pub fn softmax_channels_vjp<T: Scalar>(probs: &Tensor<T>, cot: &Tensor<T>) -> Result<Tensor<T>> {
    let s = probs.shape();
    check_cotangent("softmax_channels", s, cot.shape())?;
    let plane = s.plane();
    let (p, g) = (probs.data(), cot.data());
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for px in 0..plane {
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = base + c * plane + px;
                dot = dot + p[i] * g[i];
            }
            for c in 0..s.c {
                let i = base + c * plane + px;
                dx[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Tensor::from_vec(s, dx)
}

pub fn scale_channels_vjp<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    cot: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let si = input.shape();
    check_cotangent("scale_channels", si, cot.shape())?;
    if scale.shape() != Shape::new(si.n, si.c, 1, 1) {
        return Err(mismatch("scale_channels", "shape", "scale must be (N, C, 1, 1)"));
    }
    let plane = si.plane();
    let mut dx = cot.data().to_vec();
    let mut ds = vec![T::zero(); si.n * si.c];
    if plane > 0 {
        for (i, (dchunk, xchunk)) in dx.chunks_mut(plane).zip(input.data().chunks(plane)).enumerate() {
            let g = scale.data()[i];
            let mut acc = T::zero();
            for (d, &x) in dchunk.iter_mut().zip(xchunk) {
                acc = acc + *d * x;
                *d = *d * g;
            }
            ds[i] = acc;
        }
    }
    Ok((Tensor::from_vec(si, dx)?, Tensor::from_vec(scale.shape(), ds)?))
}

/// A differentiable kernel, for generic vector-Jacobian products.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// inputs: `[x, weights]` or `[x, weights, bias]`
    Conv2d(ConvParams),
    /// inputs: `[x, weights]` or `[x, weights, bias]`
    TransposeConv2x2,
    /// inputs: `[x, gamma, beta, running_mean, running_var]`
    BatchNorm { eps: f64, training: bool },
    Activation(ActivationKind),
    MaxPool2x2,
    GlobalAvgPool,
    /// inputs: `[a, b]`
    ConcatChannels,
    SoftmaxChannels,
    /// inputs: `[a, b]`
    Add,
    /// inputs: `[x, scale]`
    ScaleChannels,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::TransposeConv2x2 => "transpose_conv2x2",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Activation(_) => "activation",
            Op::MaxPool2x2 => "maxpool2x2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::ConcatChannels => "concat_channels",
            Op::SoftmaxChannels => "softmax_channels",
            Op::Add => "elementwise_add",
            Op::ScaleChannels => "scale_channels",
        }
    }

    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Conv2d(_) | Op::TransposeConv2x2 => (2, 3),
            Op::BatchNorm { .. } => (5, 5),
            Op::Activation(_) | Op::MaxPool2x2 | Op::GlobalAvgPool | Op::SoftmaxChannels => (1, 1),
            Op::ConcatChannels | Op::Add | Op::ScaleChannels => (2, 2),
        }
    }

    /// Runs the op forward on the same input convention as [`vjp`].
    pub fn forward<T: Scalar>(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.check_arity(inputs.len())?;
        match *self {
            Op::Conv2d(p) => super::conv2d(inputs[0], inputs[1], inputs.get(2).map(|b| b.data()), p),
            Op::TransposeConv2x2 => super::transpose_conv2x2(inputs[0], inputs[1], inputs.get(2).map(|b| b.data())),
            Op::BatchNorm { eps, training } => {
                let p = bn_params(inputs, eps);
                Ok(batchnorm2d(inputs[0], &p, training)?.0)
            }
            Op::Activation(kind) => Ok(super::activation(inputs[0], kind)),
            Op::MaxPool2x2 => Ok(maxpool2x2(inputs[0])?.output),
            Op::GlobalAvgPool => super::global_avg_pool(inputs[0]),
            Op::ConcatChannels => super::concat_channels(inputs[0], inputs[1]),
            Op::SoftmaxChannels => softmax_channels(inputs[0]),
            Op::Add => super::elementwise_add(inputs[0], inputs[1]),
            Op::ScaleChannels => super::scale_channels(inputs[0], inputs[1]),
        }
    }

    fn check_arity(&self, got: usize) -> Result<()> {
        let (lo, hi) = self.arity();
        if got < lo || got > hi {
            return Err(invalid(
                self.name(),
                format!("expected {lo}..={hi} inputs, got {got}"),
            ));
        }
        Ok(())
    }
}

fn bn_params<'a, T: Scalar>(inputs: &[&'a Tensor<T>], eps: f64) -> BatchNormParams<'a, T> {
    BatchNormParams {
        gamma: inputs[1].data(),
        beta: inputs[2].data(),
        running_mean: inputs[3].data(),
        running_var: inputs[4].data(),
        eps: T::from_f64_lossy(eps),
    }
}

/// Vector-Jacobian product of `op` at `inputs`.
///
/// Returns one cotangent per differentiable input, in input order. Running
/// batch-norm statistics are not differentiable and get no entry, so batch
/// norm returns `[dx, dgamma, dbeta]`.
pub fn vjp<T: Scalar>(op: &Op, inputs: &[&Tensor<T>], cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    op.check_arity(inputs.len())?;
    match *op {
        Op::Conv2d(p) => {
            let has_bias = inputs.len() == 3;
            if has_bias {
                check_bias("conv2d", Some(inputs[2].data()), inputs[1].shape().n)?;
            }
            let g = conv2d_vjp(inputs[0], inputs[1], has_bias, p, cot)?;
            let mut out = vec![g.input, g.weights];
            out.extend(g.bias.map(|b| reshape_like(b, inputs[2])));
            Ok(out)
        }
        Op::TransposeConv2x2 => {
            let has_bias = inputs.len() == 3;
            if has_bias {
                check_bias("transpose_conv2x2", Some(inputs[2].data()), inputs[1].shape().c)?;
            }
            let g = transpose_conv2x2_vjp(inputs[0], inputs[1], has_bias, cot)?;
            let mut out = vec![g.input, g.weights];
            out.extend(g.bias.map(|b| reshape_like(b, inputs[2])));
            Ok(out)
        }
        Op::BatchNorm { eps, training } => {
            let p = bn_params(inputs, eps);
            let (_, saved) = batchnorm2d(inputs[0], &p, training)?;
            let g = batchnorm2d_vjp(inputs[0], p.gamma, &saved, cot)?;
            Ok(vec![
                g.input,
                reshape_like(g.gamma, inputs[1]),
                reshape_like(g.beta, inputs[2]),
            ])
        }
        Op::Activation(kind) => Ok(vec![activation_vjp(inputs[0], kind, cot)?]),
        Op::MaxPool2x2 => {
            let pooled = maxpool2x2(inputs[0])?;
            Ok(vec![maxpool2x2_vjp(inputs[0].shape(), &pooled.argmax, cot)?])
        }
        Op::GlobalAvgPool => Ok(vec![global_avg_pool_vjp(inputs[0].shape(), cot)?]),
        Op::ConcatChannels => {
            let expected = super::concat_channels(inputs[0], inputs[1])?.shape();
            check_cotangent("concat_channels", expected, cot.shape())?;
            let (a, b) = concat_channels_vjp(inputs[0].shape().c, cot)?;
            Ok(vec![a, b])
        }
        Op::SoftmaxChannels => {
            let probs = softmax_channels(inputs[0])?;
            Ok(vec![softmax_channels_vjp(&probs, cot)?])
        }
        Op::Add => {
            if inputs[0].shape() != inputs[1].shape() {
                return Err(mismatch("elementwise_add", "shape", "inputs differ"));
            }
            check_cotangent("elementwise_add", inputs[0].shape(), cot.shape())?;
            Ok(vec![cot.clone(), cot.clone()])
        }
        Op::ScaleChannels => {
            let (dx, ds) = scale_channels_vjp(inputs[0], inputs[1], cot)?;
            Ok(vec![dx, ds])
        }
    }
}

fn reshape_like<T: Scalar>(v: Vec<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(like.shape(), v).expect("gradient length equals parameter length")
}

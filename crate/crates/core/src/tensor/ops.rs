use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{invalid, mismatch, Result, Scalar, Shape, Tensor};

/// Geometry of a 2-D convolution. Padding is symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride,
            padding,
            groups,
        }
    }

    /// Odd square kernel with "same" padding.
    pub const fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        Self::new(kernel, stride, (kernel - 1) / 2, groups)
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 1, 0, 1)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(invalid(op, "kernel dimensions must be positive"));
        }
        if self.stride == 0 {
            return Err(invalid(op, "stride must be positive"));
        }
        if self.groups == 0 {
            return Err(invalid(op, "groups must be positive"));
        }
        Ok(())
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate("conv2d")?;
        let (kh, kw) = self.kernel;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(mismatch(
                "conv2d",
                "H/W",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    /// Shape check shared by forward, backward and the profiler.
    pub fn output_shape(&self, input: Shape, weight: Shape) -> Result<Shape> {
        self.validate("conv2d")?;
        let g = self.groups;
        if !input.c.is_multiple_of(g) {
            return Err(mismatch(
                "conv2d",
                "C_in",
                format!("groups {g} does not divide C_in {}", input.c),
            ));
        }
        if !weight.n.is_multiple_of(g) {
            return Err(mismatch(
                "conv2d",
                "C_out",
                format!("groups {g} does not divide C_out {}", weight.n),
            ));
        }
        if weight.c * g != input.c {
            return Err(mismatch(
                "conv2d",
                "C_in",
                format!(
                    "input has {} channels but weights expect {} ({} per group x {g} groups)",
                    input.c,
                    weight.c * g,
                    weight.c
                ),
            ));
        }
        if (weight.h, weight.w) != self.kernel {
            return Err(mismatch(
                "conv2d",
                "kernel",
                format!(
                    "weights are {}x{} but params say {}x{}",
                    weight.h, weight.w, self.kernel.0, self.kernel.1
                ),
            ));
        }
        let (ho, wo) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, weight.n, ho, wo))
    }
}

/// Range of output columns `o` with `o*stride + k - pad` inside `[0, len)`.
#[inline]
pub(crate) fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) fn check_bias<T>(op: &'static str, bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(mismatch(
            op,
            "bias",
            format!("bias has {} entries, expected {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

/// Grouped 2-D convolution. `weights` is `(C_out, C_in/groups, Kh, Kw)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let wshape = weights.shape();
    let oshape = p.output_shape(ishape, wshape)?;
    check_bias("conv2d", bias, oshape.c)?;

    let (kh, kw) = p.kernel;
    let (s, pad) = (p.stride, p.padding);
    let cin_g = wshape.c;
    let cout_g = oshape.c / p.groups;
    let (ih, iw) = (ishape.h, ishape.w);
    let (oh, ow) = (oshape.h, oshape.w);
    let iplane = ishape.plane();
    let oplane = oshape.plane();
    let x = input.data();
    let wt = weights.data();

    let mut out = vec![T::zero(); oshape.numel()];
    if oplane == 0 {
        return Tensor::from_vec(oshape, out);
    }
    out.par_chunks_mut(oplane).enumerate().for_each(|(plane_idx, dst)| {
        let n = plane_idx / oshape.c;
        let oc = plane_idx % oshape.c;
        let g = oc / cout_g;
        let b = bias.map_or(T::zero(), |b| b[oc]);
        dst.iter_mut().for_each(|v| *v = b);
        for icl in 0..cin_g {
            let ic = g * cin_g + icl;
            let src = &x[(n * ishape.c + ic) * iplane..][..iplane];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ih, oh, ky, s, pad);
                for kx in 0..kw {
                    let wv = wt[((oc * cin_g + icl) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(iw, ow, kx, s, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let row = &src[iy * iw..][..iw];
                        let drow = &mut dst[oy * ow..][..ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let n_cols = ox_hi - ox_lo;
                            for (d, &v) in drow[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + n_cols]) {
                                *d = *d + wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - pad;
                                drow[ox] = drow[ox] + wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(oshape, out)
}

pub(crate) fn transpose_conv_shape(input: Shape, weight: Shape) -> Result<Shape> {
    if weight.n != input.c {
        return Err(mismatch(
            "transpose_conv2x2",
            "C_in",
            format!("input has {} channels, weights expect {}", input.c, weight.n),
        ));
    }
    if (weight.h, weight.w) != (2, 2) {
        return Err(mismatch(
            "transpose_conv2x2",
            "kernel",
            format!("kernel must be 2x2, got {}x{}", weight.h, weight.w),
        ));
    }
    Ok(Shape::new(input.n, weight.c, input.h * 2, input.w * 2))
}

/// Stride-2, 2x2 transposed convolution. `weights` is `(C_in, C_out, 2, 2)`.
/// Each input pixel scatters into its own disjoint 2x2 output block.
pub fn transpose_conv2x2<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let oshape = transpose_conv_shape(ishape, weights.shape())?;
    check_bias("transpose_conv2x2", bias, oshape.c)?;
    let (h, w) = (ishape.h, ishape.w);
    let ow = oshape.w;
    let cout = oshape.c;
    let iplane = ishape.plane();
    let x = input.data();
    let wt = weights.data();

    let mut out = vec![T::zero(); oshape.numel()];
    if oshape.plane() == 0 {
        return Tensor::from_vec(oshape, out);
    }
    out.par_chunks_mut(oshape.plane()).enumerate().for_each(|(plane_idx, dst)| {
        let n = plane_idx / cout;
        let oc = plane_idx % cout;
        let b = bias.map_or(T::zero(), |b| b[oc]);
        dst.iter_mut().for_each(|v| *v = b);
        for ic in 0..ishape.c {
            let src = &x[(n * ishape.c + ic) * iplane..][..iplane];
            let k = &wt[(ic * cout + oc) * 4..][..4];
            for y in 0..h {
                for xx in 0..w {
                    let v = src[y * w + xx];
                    let top = (2 * y) * ow + 2 * xx;
                    let bot = top + ow;
                    dst[top] = dst[top] + v * k[0];
                    dst[top + 1] = dst[top + 1] + v * k[1];
                    dst[bot] = dst[bot] + v * k[2];
                    dst[bot + 1] = dst[bot + 1] + v * k[3];
                }
            }
        }
    });
    Tensor::from_vec(oshape, out)
}

/// Learnable and running parameters of a batch-norm layer, one entry per channel.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub eps: T,
}

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the running-average update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Statistics a batch-norm forward pass hands to its backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormSaved<T> {
    /// Per-channel mean actually used (batch mean in training, running mean otherwise).
    pub mean: Vec<T>,
    /// Per-channel `1/sqrt(var + eps)` actually used.
    pub inv_std: Vec<T>,
    /// Biased batch variance; present in training mode only.
    pub batch_var: Option<Vec<T>>,
    pub training: bool,
}

pub(crate) fn check_bn<T: Scalar>(input: Shape, p: &BatchNormParams<'_, T>, training: bool) -> Result<()> {
    let c = input.c;
    for (name, v) in [
        ("gamma", p.gamma),
        ("beta", p.beta),
        ("running_mean", p.running_mean),
        ("running_var", p.running_var),
    ] {
        if v.len() != c {
            return Err(mismatch(
                "batchnorm2d",
                "C",
                format!("{name} has {} entries, input has {c} channels", v.len()),
            ));
        }
    }
    // eps = 0 is allowed with running statistics (pure affine map); batch
    // statistics of a constant channel would divide by zero.
    if !p.eps.is_finite() || p.eps < T::zero() || (training && p.eps <= T::zero()) {
        return Err(invalid(
            "batchnorm2d",
            format!("eps must be positive (got {})", p.eps),
        ));
    }
    if training && input.n * input.plane() == 0 {
        return Err(invalid("batchnorm2d", "batch statistics over an empty batch"));
    }
    Ok(())
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// In training mode the batch statistics are used; callers fold
/// [`BatchNormSaved::batch_var`] into the running statistics with
/// [`update_running_stats`].
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    p: &BatchNormParams<'_, T>,
    training: bool,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let shape = input.shape();
    check_bn(shape, p, training)?;
    let (n, c, plane) = (shape.n, shape.c, shape.plane());
    let x = input.data();

    let (mean, var) = if training {
        let count = T::from_usize(n * plane).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
            }
            let m = s / count;
            let mut v = T::zero();
            for b in 0..n {
                for &xv in &x[(b * c + ch) * plane..][..plane] {
                    let d = xv - m;
                    v = v + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        (mean, var)
    } else {
        (p.running_mean.to_vec(), p.running_var.to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();

    let mut out = vec![T::zero(); shape.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = p.gamma[ch] * inv_std[ch];
            let shift = p.beta[ch];
            let m = mean[ch];
            for (o, &xv) in out[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *o = (xv - m) * scale + shift;
            }
        }
    }
    let saved = BatchNormSaved {
        mean,
        inv_std,
        batch_var: training.then_some(var),
        training,
    };
    Ok((Tensor::from_vec(shape, out)?, saved))
}

/// `running = momentum * running + (1 - momentum) * batch`, using the
/// unbiased batch variance for the running variance.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    saved: &BatchNormSaved<T>,
    count: usize,
    momentum: T,
) {
    let Some(batch_var) = &saved.batch_var else {
        return;
    };
    let keep = momentum;
    let take = T::one() - momentum;
    let unbias = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = keep * running_mean[ch] + take * saved.mean[ch];
        running_var[ch] = keep * running_var[ch] + take * batch_var[ch] * unbias;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Relu6,
    Sigmoid,
    HardSigmoid,
    HardSwish,
    Identity,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 6] = [
        Self::Relu,
        Self::Relu6,
        Self::Sigmoid,
        Self::HardSigmoid,
        Self::HardSwish,
        Self::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Relu6 => "relu6",
            Self::Sigmoid => "sigmoid",
            Self::HardSigmoid => "hard_sigmoid",
            Self::HardSwish => "hard_swish",
            Self::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let three = T::from_f64_lossy(3.0);
        let six = T::from_f64_lossy(6.0);
        match self {
            Self::Relu => x.max(T::zero()),
            Self::Relu6 => x.max(T::zero()).min(six),
            Self::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Self::HardSigmoid => (x + three).max(T::zero()).min(six) / six,
            Self::HardSwish => x * ((x + three).max(T::zero()).min(six) / six),
            Self::Identity => x,
        }
    }

    /// Derivative, taking 0 at every kink (e.g. relu at 0, relu6 at 6).
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        let three = T::from_f64_lossy(3.0);
        let six = T::from_f64_lossy(6.0);
        match self {
            Self::Relu => {
                if x > zero {
                    T::one()
                } else {
                    zero
                }
            }
            Self::Relu6 => {
                if x > zero && x < six {
                    T::one()
                } else {
                    zero
                }
            }
            Self::Sigmoid => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            }
            Self::HardSigmoid => {
                if x > -three && x < three {
                    T::one() / six
                } else {
                    zero
                }
            }
            Self::HardSwish => {
                if x <= -three {
                    zero
                } else if x >= three {
                    T::one()
                } else {
                    (x + x + three) / six
                }
            }
            Self::Identity => T::one(),
        }
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    input.map(|x| kind.apply(x))
}

/// Output of [`maxpool2x2`]: the pooled tensor and, per output element, the
/// flat input index of the selected maximum.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<MaxPoolOutput<T>> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(mismatch(
            "maxpool2x2",
            "H/W",
            format!("spatial dims must be even, got {}x{}", s.h, s.w),
        ));
    }
    let oshape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(oshape.numel());
    let mut argmax = Vec::with_capacity(oshape.numel());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oshape.h {
            for ox in 0..oshape.w {
                let i0 = base + 2 * oy * s.w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + s.w, i0 + s.w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_vec(oshape, out)?,
        argmax,
    })
}

/// Spatial mean per channel, `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(mismatch("global_avg_pool", "H/W", "empty spatial extent"));
    }
    let denom = T::from_usize(s.plane()).unwrap();
    let out = input
        .data()
        .chunks(s.plane())
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (dim, x, y) in [("N", sa.n, sb.n), ("H", sa.h, sb.h), ("W", sa.w, sb.w)] {
        if x != y {
            return Err(mismatch(
                "concat_channels",
                dim,
                format!("{sa} vs {sb}"),
            ));
        }
    }
    let plane = sa.plane();
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.c * plane..][..sa.c * plane]);
        data.extend_from_slice(&b.data()[n * sb.c * plane..][..sb.c * plane]);
    }
    Tensor::from_vec(shape, data)
}

/// Per-pixel softmax across channels, stabilized by max subtraction.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c == 0 {
        return Err(mismatch("softmax_channels", "C", "needs at least one channel"));
    }
    let plane = s.plane();
    let x = input.data();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(x[base + c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x[base + c * plane + p] - m).exp();
                out[base + c * plane + p] = e;
                z = z + e;
            }
            for c in 0..s.c {
                let o = &mut out[base + c * plane + p];
                *o = *o / z;
            }
        }
    }
    Tensor::from_vec(s, out)
}

pub fn elementwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "elementwise_add",
            "shape",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Multiplies every channel plane of `input` by the matching entry of
/// `scale` (`(N, C, 1, 1)`), the excitation step of squeeze-and-excitation.
pub fn scale_channels<T: Scalar>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (si, ss) = (input.shape(), scale.shape());
    if ss != Shape::new(si.n, si.c, 1, 1) {
        return Err(mismatch(
            "scale_channels",
            "shape",
            format!("scale {ss} does not match input {si} as (N, C, 1, 1)"),
        ));
    }
    let plane = si.plane();
    let mut data = input.data().to_vec();
    if plane > 0 {
        for (chunk, &g) in data.chunks_mut(plane).zip(scale.data()) {
            chunk.iter_mut().for_each(|v| *v = *v * g);
        }
    }
    Tensor::from_vec(si, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_pointwise() {
        let x = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |n, c, h, w| {
            (n + 2 * c) as f32 - 0.5 * h as f32 + 0.25 * w as f32
        });
        let wt = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d(&x, &wt, None, ConvParams::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_with_zero_padding() {
        let x = Tensor::<f32>::full(Shape::new(1, 3, 8, 8), 1.0);
        let wt = Tensor::full(Shape::new(1, 3, 3, 3), 1.0);
        let y = conv2d(&x, &wt, None, ConvParams::same(3, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 8, 8));
        assert_eq!(y.at(0, 0, 3, 4), 27.0);
        assert_eq!(y.at(0, 0, 0, 0), 12.0);
        assert_eq!(y.at(0, 0, 7, 7), 12.0);
        assert_eq!(y.at(0, 0, 0, 4), 18.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dimension() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 5, 5));
        let wt = Tensor::zeros(Shape::new(6, 3, 3, 3));
        let err = conv2d(&x, &wt, None, ConvParams::same(3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("C_in"), "{err}");
        let wt = Tensor::zeros(Shape::new(6, 2, 3, 3));
        let err = conv2d(&x, &wt, None, ConvParams::same(3, 1, 4)).unwrap_err();
        assert!(err.to_string().contains("C_out"), "{err}");
    }

    #[test]
    fn conv_output_formula_strided() {
        let p = ConvParams::new(3, 2, 1, 1);
        assert_eq!(p.output_hw(7, 7).unwrap(), (4, 4));
        assert_eq!(p.output_hw(256, 256).unwrap(), (128, 128));
        assert_eq!(ConvParams::new(5, 2, 2, 1).output_hw(32, 32).unwrap(), (16, 16));
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..9 {
            for k in 0..5 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        if len + 2 * pad < k + 1 {
                            continue;
                        }
                        let out_len = (len + 2 * pad - (k + 1)) / stride + 1;
                        let (lo, hi) = valid_range(len, out_len, k, stride, pad);
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "len {len} k {k} s {stride} p {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_single_pixel_scatter() {
        let x = t(Shape::new(1, 1, 1, 1), &[2.0]);
        let k = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let y = transpose_conv2x2(&x, &k, None).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
        let z = transpose_conv2x2(&Tensor::zeros(Shape::new(1, 1, 3, 3)), &k, Some(&[0.5])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.5));
        assert!(transpose_conv2x2(&Tensor::zeros(Shape::new(1, 2, 3, 3)), &k, None).is_err());
    }

    #[test]
    fn batchnorm_inference_affine() {
        let x = t(Shape::new(1, 1, 1, 3), &[3.0, -1.0, 0.5]);
        let ones = [1.0f32];
        let zeros = [0.0f32];
        let p = BatchNormParams {
            gamma: &ones,
            beta: &zeros,
            running_mean: &zeros,
            running_var: &ones,
            eps: 0.0,
        };
        let (y, _) = batchnorm2d(&x, &p, false).unwrap();
        assert_eq!(y, x);
        let two = [2.0f32];
        let p = BatchNormParams {
            gamma: &two,
            beta: &ones,
            ..p
        };
        let (y, _) = batchnorm2d(&x, &p, false).unwrap();
        assert_eq!(y.data()[0], 7.0);
    }

    #[test]
    fn batchnorm_rejects_bad_eps() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let one = [1.0f32];
        let p = BatchNormParams {
            gamma: &one,
            beta: &one,
            running_mean: &one,
            running_var: &one,
            eps: -1e-5,
        };
        assert!(batchnorm2d(&x, &p, false).is_err());
        let p = BatchNormParams { eps: 0.0, ..p };
        assert!(batchnorm2d(&x, &p, true).is_err());
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let x = Tensor::<f32>::from_fn(Shape::new(3, 2, 4, 4), |n, c, h, w| {
            ((n * 7 + c * 3 + h * 5 + w * 11) % 13) as f32 * (c as f32 + 1.0) - 2.0
        });
        let g = [1.0f32; 2];
        let b = [0.0f32; 2];
        let p = BatchNormParams {
            gamma: &g,
            beta: &b,
            running_mean: &b,
            running_var: &g,
            eps: 1e-5,
        };
        let (y, saved) = batchnorm2d(&x, &p, true).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 4, i % 4) as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
        let mut rm = vec![0.0f32; 2];
        let mut rv = vec![1.0f32; 2];
        update_running_stats(&mut rm, &mut rv, &saved, 48, 0.9);
        assert!((rm[0] - 0.1 * saved.mean[0]).abs() < 1e-6);
    }

    #[test]
    fn activation_endpoints() {
        let x = t(Shape::new(1, 1, 1, 3), &[-3.0, 0.0, 3.0]);
        assert_eq!(activation(&x, ActivationKind::HardSigmoid).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(activation(&x, ActivationKind::HardSwish).data(), &[0.0, 0.0, 3.0]);
        let x = t(Shape::new(1, 1, 1, 3), &[-1.0, 3.0, 9.0]);
        assert_eq!(activation(&x, ActivationKind::Relu6).data(), &[0.0, 3.0, 6.0]);
        assert_eq!(ActivationKind::Relu.derivative(0.0f32), 0.0);
    }

    #[test]
    fn maxpool_basics() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let out = maxpool2x2(&x).unwrap();
        assert_eq!(out.output.data(), &[4.0]);
        assert_eq!(out.argmax, vec![3]);
        let c = Tensor::<f32>::full(Shape::new(1, 2, 4, 4), 1.5);
        let out = maxpool2x2(&c).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 1.5));
        assert_eq!(out.argmax[0], 0, "ties break to first element");
        assert!(maxpool2x2(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn gap_mean() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f32>::full(Shape::new(2, 3, 5, 5), -2.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn concat_shapes_and_identity() {
        let a = Tensor::<f32>::from_fn(Shape::new(1, 3, 4, 4), |_, c, h, w| (c * 16 + h * 4 + w) as f32);
        let b = Tensor::<f32>::full(Shape::new(1, 5, 4, 4), 9.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 4, 4));
        assert_eq!(y.slice_channels(0, 3).unwrap(), a);
        let empty = Tensor::<f32>::zeros(Shape::new(1, 0, 4, 4));
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros(Shape::new(1, 1, 4, 2))).is_err());
    }

    #[test]
    fn softmax_analytic() {
        let x = t(Shape::new(1, 2, 1, 1), &[0.0, 3.0f32.ln()]);
        let y = softmax_channels(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-6);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
        let eq = Tensor::<f32>::full(Shape::new(1, 9, 2, 2), 0.3);
        let y = softmax_channels(&eq).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-6));
    }

    #[test]
    fn add_identities() {
        let a = Tensor::<f32>::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| c as f32 - h as f32 * 0.3 + w as f32);
        let zero = Tensor::zeros(a.shape());
        assert_eq!(elementwise_add(&a, &zero).unwrap(), a);
        let neg = a.map(|v| -v);
        assert!(elementwise_add(&a, &neg).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(elementwise_add(&a, &Tensor::zeros(Shape::new(1, 2, 3, 2))).is_err());
    }
}

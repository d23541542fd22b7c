//! Literal nested-loop reference kernels that also count the
//! multiply-accumulate iterations they execute.
//!
//! Padding taps are visited and multiply a zero, so they count as MACs the
//! same way a dense hardware kernel spends them.

use super::{ConvParams, Result, Scalar, Tensor};
use super::ops::transpose_conv_shape;

/// Output plus the number of multiply-accumulate iterations executed.
#[derive(Clone, Debug)]
pub struct Counted<T> {
    pub output: Tensor<T>,
    pub macs: u64,
}

pub fn conv2d_counted<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    p: ConvParams,
) -> Result<Counted<T>> {
    let is = input.shape();
    let ws = weights.shape();
    let os = p.output_shape(is, ws)?;
    let cin_g = ws.c;
    let cout_g = os.c / p.groups;
    let mut out = Tensor::zeros(os);
    let mut macs = 0u64;
    for n in 0..os.n {
        for oc in 0..os.c {
            let g = oc / cout_g;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = bias.map_or(T::zero(), |b| b[oc]);
                    for icl in 0..cin_g {
                        for ky in 0..p.kernel.0 {
                            for kx in 0..p.kernel.1 {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                let v = if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                                    input.at(n, g * cin_g + icl, iy as usize, ix as usize)
                                } else {
                                    T::zero()
                                };
                                acc = acc + weights.at(oc, icl, ky, kx) * v;
                                macs += 1;
                            }
                        }
                    }
                    let idx = out.index(n, oc, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    // MACs are reported per image.
    Ok(Counted {
        output: out,
        macs: macs / os.n.max(1) as u64,
    })
}

pub fn transpose_conv2x2_counted<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Counted<T>> {
    let is = input.shape();
    let os = transpose_conv_shape(is, weights.shape())?;
    let mut out = Tensor::zeros(os);
    let mut macs = 0u64;
    for n in 0..os.n {
        for oc in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = bias.map_or(T::zero(), |b| b[oc]);
                    for ic in 0..is.c {
                        acc = acc + input.at(n, ic, oy / 2, ox / 2) * weights.at(ic, oc, oy % 2, ox % 2);
                        macs += 1;
                    }
                    let idx = out.index(n, oc, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(Counted {
        output: out,
        macs: macs / os.n.max(1) as u64,
    })
}

use super::TrainError;
use crate::metrics::{LabelMask, MetricsError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean negative log-likelihood over counted pixels.
    pub loss: f64,
    /// d loss / d logits; zero at ignored pixels.
    pub grad: Tensor<T>,
    /// Number of non-ignored pixels.
    pub count: usize,
}

/// Mean pixel-wise cross-entropy of `logits (N, K, H, W)` against `target`,
/// computed with a per-pixel log-sum-exp.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    target: &LabelMask,
    ignore_label: u8,
) -> Result<LossOutput<T>, TrainError> {
    let s = logits.shape();
    if (s.n, s.h, s.w) != target.dims() {
        return Err(MetricsError::ShapeMismatch {
            pred: (s.n, s.h, s.w),
            gt: target.dims(),
        }
        .into());
    }
    let k = s.c;
    let plane = s.plane();
    let x = logits.data();
    let mut grad = vec![T::zero(); s.numel()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for n in 0..s.n {
        let base = n * k * plane;
        for p in 0..plane {
            let label = target.labels[n * plane + p];
            if label == ignore_label {
                continue;
            }
            if label as usize >= k {
                return Err(MetricsError::LabelOutOfRange {
                    n,
                    y: p / s.w,
                    x: p % s.w,
                    label,
                    k,
                    ignore: ignore_label,
                }
                .into());
            }
            let at = |c: usize| x[base + c * plane + p];
            let m = (0..k).map(at).fold(T::neg_infinity(), T::max);
            let sum: T = (0..k).map(|c| (at(c) - m).exp()).sum();
            let lse = m + sum.ln();
            total += (lse - at(label as usize)).to_f64_lossy();
            for c in 0..k {
                grad[base + c * plane + p] = (at(c) - lse).exp();
            }
            grad[base + label as usize * plane + p] = grad[base + label as usize * plane + p] - T::one();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::NoPixels);
    }
    let inv = T::one() / T::from_usize(count).expect("count fits");
    for g in &mut grad {
        *g = *g * inv;
    }
    Ok(LossOutput {
        loss: total / count as f64,
        grad: Tensor::from_vec(s, grad).expect("same shape"),
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 9, 3, 3));
        let t = LabelMask::new(2, 3, 3, (0..18).map(|i| (i % 9) as u8).collect());
        let out = cross_entropy_loss(&logits, &t, 255).unwrap();
        assert!((out.loss - 9f64.ln()).abs() < 1e-12);
        assert_eq!(out.count, 18);
    }

    #[test]
    fn saturated_logits() {
        let logits = Tensor::<f32>::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| if c == 2 { 25.0 } else { 0.0 });
        let out = cross_entropy_loss(&logits, &LabelMask::filled(1, 2, 2, 2), 255).unwrap();
        assert!(out.loss < 1e-6 && out.loss >= 0.0);
    }

    #[test]
    fn ignored_pixels_have_no_gradient() {
        let logits = Tensor::<f64>::from_fn(Shape::new(1, 2, 1, 2), |_, c, _, x| (c + x) as f64);
        let out = cross_entropy_loss(&logits, &LabelMask::new(1, 1, 2, vec![255, 1]), 255).unwrap();
        assert_eq!(out.count, 1);
        assert_eq!(out.grad.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.grad.at(0, 1, 0, 0), 0.0);
        assert!(matches!(
            cross_entropy_loss(&logits, &LabelMask::filled(1, 1, 2, 255), 255),
            Err(TrainError::NoPixels)
        ));
        assert!(cross_entropy_loss(&logits, &LabelMask::filled(1, 1, 2, 2), 255).is_err());
    }
}

//! Joint segmentation + classification objective and its analytic gradients.
//!
//! The total loss is `λ_seg · L_seg + λ_cls · L_cls`, where `L_seg` is the
//! pixel-averaged binary cross-entropy of a probability map against its
//! ground-truth mask and `L_cls` is the binary cross-entropy of a single
//! sample-level defect probability.
//!
//! Probabilities are clamped to `[eps, 1 - eps]` before the logarithm. The
//! gradient is that of the clamped composite: zero wherever the clamp is
//! active, i.e. for inputs strictly below `eps` or strictly above `1 - eps`.
//!
//! The two gradient channels are independent at this boundary: the map
//! gradient depends only on `(S, Y, λ_seg)` and the scalar gradient only on
//! `(p̂, y, λ_cls)`.

use thiserror::Error;

use crate::mask::{BinaryMask, ProbabilityMap};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("probability map is {map_width}x{map_height} but mask is {mask_width}x{mask_height}")]
    ShapeMismatch {
        map_width: usize,
        map_height: usize,
        mask_width: usize,
        mask_height: usize,
    },
    #[error("clamp epsilon must lie in (0, 0.5), got {0}")]
    InvalidEps(f64),
    #[error("loss weights must be nonnegative with a positive sum, got seg={seg} cls={cls}")]
    InvalidWeights { seg: f64, cls: f64 },
    #[error("sample probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
}

/// `λ_seg` and `λ_cls`. Defaults to 0.5 each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T = f64> {
    lambda_seg: T,
    lambda_cls: T,
}

impl<T: Scalar> LossWeights<T> {
    pub fn new(lambda_seg: T, lambda_cls: T) -> Result<Self, LossError> {
        let ok = lambda_seg >= T::zero()
            && lambda_cls >= T::zero()
            && lambda_seg.is_finite()
            && lambda_cls.is_finite()
            && lambda_seg + lambda_cls > T::zero();
        if !ok {
            return Err(LossError::InvalidWeights {
                seg: lambda_seg.as_f64(),
                cls: lambda_cls.as_f64(),
            });
        }
        Ok(Self {
            lambda_seg,
            lambda_cls,
        })
    }

    pub fn lambda_seg(&self) -> T {
        self.lambda_seg
    }

    pub fn lambda_cls(&self) -> T {
        self.lambda_cls
    }

    /// Both weights multiplied by `factor > 0`.
    pub fn scaled(&self, factor: T) -> Result<Self, LossError> {
        Self::new(self.lambda_seg * factor, self.lambda_cls * factor)
    }
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        let half = T::lit(0.5);
        Self {
            lambda_seg: half,
            lambda_cls: half,
        }
    }
}

/// Per-pixel `∂L/∂S`, row-major, same shape as the source map.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField<T = f64> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> GradientField<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    fn scaled(self, factor: T) -> Self {
        Self {
            values: self.values.into_iter().map(|g| g * factor).collect(),
            ..self
        }
    }
}

/// Raw component losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss<T = f64> {
    pub total: T,
    pub seg: T,
    pub cls: T,
}

fn check_eps<T: Scalar>(eps: T) -> Result<(), LossError> {
    if eps > T::zero() && eps < T::lit(0.5) {
        Ok(())
    } else {
        Err(LossError::InvalidEps(eps.as_f64()))
    }
}

fn check_shapes<T: Scalar>(s: &ProbabilityMap<T>, y: &BinaryMask) -> Result<(), LossError> {
    if s.shape() != y.shape() {
        return Err(LossError::ShapeMismatch {
            map_width: s.width(),
            map_height: s.height(),
            mask_width: y.width(),
            mask_height: y.height(),
        });
    }
    Ok(())
}

fn check_probability<T: Scalar>(p: T) -> Result<(), LossError> {
    if p >= T::zero() && p <= T::one() {
        Ok(())
    } else {
        Err(LossError::InvalidProbability(p.as_f64()))
    }
}

#[inline]
fn clamp<T: Scalar>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

#[inline]
fn clamp_active<T: Scalar>(p: T, eps: T) -> bool {
    p < eps || p > T::one() - eps
}

#[inline]
fn bce<T: Scalar>(p: T, label: bool, eps: T) -> T {
    let p = clamp(p, eps);
    if label {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

#[inline]
fn bce_grad<T: Scalar>(p: T, label: bool, eps: T) -> T {
    if clamp_active(p, eps) {
        return T::zero();
    }
    if label {
        -T::one() / p
    } else {
        T::one() / (T::one() - p)
    }
}

/// Pixel-averaged binary cross-entropy of `s` against mask `y`.
pub fn seg_bce<T: Scalar>(s: &ProbabilityMap<T>, y: &BinaryMask, eps: T) -> Result<T, LossError> {
    check_eps(eps)?;
    check_shapes(s, y)?;
    let sum = s
        .values()
        .iter()
        .zip(y.pixels())
        .fold(T::zero(), |acc, (&p, &label)| acc + bce(p, label, eps));
    Ok(sum / T::from_count(s.len() as u64))
}

/// Gradient of [`seg_bce`] with respect to every pixel of `s`.
pub fn seg_bce_grad<T: Scalar>(
    s: &ProbabilityMap<T>,
    y: &BinaryMask,
    eps: T,
) -> Result<GradientField<T>, LossError> {
    check_eps(eps)?;
    check_shapes(s, y)?;
    let n = T::from_count(s.len() as u64);
    let values = s
        .values()
        .iter()
        .zip(y.pixels())
        .map(|(&p, &label)| bce_grad(p, label, eps) / n)
        .collect();
    Ok(GradientField {
        width: s.width(),
        height: s.height(),
        values,
    })
}

/// Binary cross-entropy of the sample-level probability `p_hat`.
pub fn cls_bce<T: Scalar>(p_hat: T, y: bool, eps: T) -> Result<T, LossError> {
    check_eps(eps)?;
    check_probability(p_hat)?;
    Ok(bce(p_hat, y, eps))
}

pub fn cls_bce_grad<T: Scalar>(p_hat: T, y: bool, eps: T) -> Result<T, LossError> {
    check_eps(eps)?;
    check_probability(p_hat)?;
    Ok(bce_grad(p_hat, y, eps))
}

/// `total = λ_seg · seg + λ_cls · cls`, with the raw parts returned too.
pub fn joint_loss<T: Scalar>(
    s: &ProbabilityMap<T>,
    y_mask: &BinaryMask,
    p_hat: T,
    y: bool,
    weights: &LossWeights<T>,
    eps: T,
) -> Result<JointLoss<T>, LossError> {
    let seg = seg_bce(s, y_mask, eps)?;
    let cls = cls_bce(p_hat, y, eps)?;
    Ok(JointLoss {
        total: weights.lambda_seg * seg + weights.lambda_cls * cls,
        seg,
        cls,
    })
}

/// Gradients of [`joint_loss`]'s total with respect to the map and to `p̂`.
pub fn joint_grads<T: Scalar>(
    s: &ProbabilityMap<T>,
    y_mask: &BinaryMask,
    p_hat: T,
    y: bool,
    weights: &LossWeights<T>,
    eps: T,
) -> Result<(GradientField<T>, T), LossError> {
    let ds = seg_bce_grad(s, y_mask, eps)?.scaled(weights.lambda_seg);
    let dp = weights.lambda_cls * cls_bce_grad(p_hat, y, eps)?;
    Ok((ds, dp))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = DEFAULT_EPS;

    fn map(w: usize, h: usize, v: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(w, h, v.to_vec()).unwrap()
    }

    fn mask(w: usize, h: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(w, h, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn half_everywhere_is_ln2() {
        let s = ProbabilityMap::filled(3, 3, 0.5).unwrap();
        let y = mask(3, 3, &[1, 0, 1, 1, 0, 0, 0, 0, 1]);
        assert!((seg_bce(&s, &y, EPS).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_costs_about_eps() {
        let y = mask(2, 2, &[1, 0, 0, 1]);
        let s = map(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = seg_bce(&s, &y, EPS).unwrap();
        assert!((l - -(1.0 - EPS).ln()).abs() < 1e-20);
        assert!((l - EPS).abs() < 1e-12);
    }

    #[test]
    fn seg_grad_examples() {
        let g = seg_bce_grad(&map(1, 1, &[0.5]), &mask(1, 1, &[1]), EPS).unwrap();
        assert_eq!(g.values(), &[-2.0]);
        let g = seg_bce_grad(&map(2, 2, &[0.5, 0.2, 0.3, 0.4]), &mask(2, 2, &[0, 1, 1, 1]), EPS)
            .unwrap();
        assert_eq!(g.values()[0], 0.5);
    }

    #[test]
    fn clamped_pixels_have_zero_gradient_and_finite_loss() {
        let s = map(2, 1, &[0.0, 1.0]);
        let y = mask(2, 1, &[1, 0]);
        let l = seg_bce(&s, &y, EPS).unwrap();
        assert!(l.is_finite());
        assert!((l - -(EPS.ln())).abs() < 1e-9);
        assert_eq!(seg_bce_grad(&s, &y, EPS).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn cls_examples() {
        assert!((cls_bce(0.5, true, EPS).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cls_bce(0.5, false, EPS).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cls_bce(1.0 - EPS, true, EPS).unwrap() - EPS).abs() < 1e-12);
        assert!((cls_bce(0.25, true, EPS).unwrap() - 1.386294).abs() < 1e-6);
        assert_eq!(cls_bce_grad(0.5, true, EPS).unwrap(), -2.0);
        assert_eq!(cls_bce_grad(0.5, false, EPS).unwrap(), 2.0);
        assert_eq!(cls_bce_grad(0.0, true, EPS).unwrap(), 0.0);
        assert!(cls_bce(1.2, true, EPS).is_err());
    }

    #[test]
    fn input_validation() {
        let s = map(2, 1, &[0.5, 0.5]);
        assert!(matches!(
            seg_bce(&s, &mask(1, 2, &[0, 1]), EPS),
            Err(LossError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            seg_bce(&s, &mask(2, 1, &[0, 1]), 0.5),
            Err(LossError::InvalidEps(_))
        ));
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-0.1, 1.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn joint_examples() {
        let s = map(2, 1, &[0.3, 0.8]);
        let y = mask(2, 1, &[0, 1]);
        let w = LossWeights::new(1.0, 0.0).unwrap();
        let l = joint_loss(&s, &y, 0.7, true, &w, EPS).unwrap();
        assert_eq!(l.total, l.seg);

        let half: LossWeights = LossWeights::default();
        assert!((half.lambda_seg() * 0.4 + half.lambda_cls() * 0.8 - 0.6).abs() < 1e-15);

        let l = joint_loss(&s, &y, 0.7, true, &half, EPS).unwrap();
        assert_eq!(l.total, 0.5 * l.seg + 0.5 * l.cls);
    }

    #[test]
    fn joint_grad_routing() {
        let s = map(2, 2, &[0.3, 0.8, 0.1, 0.6]);
        let y = mask(2, 2, &[0, 1, 0, 1]);
        let detached = LossWeights::new(0.0, 1.0).unwrap();
        let (ds, dp) = joint_grads(&s, &y, 0.4, true, &detached, EPS).unwrap();
        assert!(ds.values().iter().all(|&g| g == 0.0));
        assert_eq!(dp, -1.0 / 0.4);

        let w = LossWeights::new(0.7, 0.3).unwrap();
        let halved = w.scaled(0.5).unwrap();
        let (ds1, dp1) = joint_grads(&s, &y, 0.4, true, &w, EPS).unwrap();
        let (ds2, dp2) = joint_grads(&s, &y, 0.4, true, &halved, EPS).unwrap();
        assert_eq!(dp2, dp1 * 0.5);
        for (a, b) in ds1.values().iter().zip(ds2.values()) {
            assert_eq!(*b, a * 0.5);
        }
    }

    #[test]
    fn f32_instantiation() {
        let s = ProbabilityMap::<f32>::filled(2, 2, 0.5).unwrap();
        let y = mask(2, 2, &[1, 0, 0, 1]);
        let l = seg_bce(&s, &y, 1e-6f32).unwrap();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
    }
}

//! Mask and probability-map types and exact per-sample pixel confusion.
//!
//! A [`BinaryMask`] is the defect map of one sample: ground truth or an
//! already binarized prediction. A [`ProbabilityMap`] is the raw output of a
//! segmentation head. Binarization happens exactly once, through
//! [`binarize`], so every downstream consumer sees the same pixels.

use std::ops::{Add, AddAssign};
use std::iter::Sum;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("expected {expected} pixels for {width}x{height}, got {actual}")]
    LengthMismatch {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("probability at pixel {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("shape mismatch: ground truth is {gt_width}x{gt_height}, prediction is {pred_width}x{pred_height}")]
    ShapeMismatch {
        gt_width: usize,
        gt_height: usize,
        pred_width: usize,
        pred_height: usize,
    },
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::EmptyDimensions { width, height });
    }
    let expected = width
        .checked_mul(height)
        .ok_or(MaskError::EmptyDimensions { width, height })?;
    if len != expected {
        return Err(MaskError::LengthMismatch {
            width,
            height,
            expected,
            actual: len,
        });
    }
    Ok(())
}

/// Row-major boolean defect map; `true` marks a defect pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self, MaskError> {
        check_dims(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// All-background mask.
    pub fn empty(width: usize, height: usize) -> Result<Self, MaskError> {
        Self::new(width, height, vec![false; width.saturating_mul(height)])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        let mut pixels = Vec::with_capacity(width.saturating_mul(height));
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    /// Always false; masks have at least one pixel.
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.pixels[y * self.width + x] = value;
    }

    /// Number of defect pixels.
    pub fn count(&self) -> u64 {
        self.pixels.iter().filter(|&&p| p).count() as u64
    }

    pub fn any(&self) -> bool {
        self.pixels.iter().any(|&p| p)
    }

    /// Pixel-wise union with another mask of the same shape.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), MaskError> {
        ensure_same_shape(self.shape(), other.shape())?;
        for (a, &b) in self.pixels.iter_mut().zip(&other.pixels) {
            *a |= b;
        }
        Ok(())
    }

    /// 8-connected components of the defect pixels, each as a list of
    /// row-major pixel indices. Components are ordered by their first pixel
    /// in raster order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; self.pixels.len()];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.pixels.len() {
            if !self.pixels[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let mut component = Vec::new();
            while let Some(idx) = stack.pop() {
                component.push(idx);
                let (x, y) = (idx % w, idx / w);
                let x0 = x.saturating_sub(1);
                let y0 = y.saturating_sub(1);
                let x1 = (x + 1).min(w - 1);
                let y1 = (y + 1).min(h - 1);
                for ny in y0..=y1 {
                    for nx in x0..=x1 {
                        let n = ny * w + nx;
                        if self.pixels[n] && !seen[n] {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
            component.sort_unstable();
            out.push(component);
        }
        out
    }

    /// Area of the largest 8-connected defect component, 0 for an empty mask.
    pub fn max_component_area(&self) -> u64 {
        self.components()
            .iter()
            .map(|c| c.len() as u64)
            .max()
            .unwrap_or(0)
    }
}

/// Row-major map of defect probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T = f64> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Rejects NaN and anything outside `[0, 1]`.
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self, MaskError> {
        check_dims(width, height, values.len())?;
        if let Some((index, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(MaskError::OutOfRange {
                index,
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self, MaskError> {
        Self::new(width, height, vec![value; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    /// Returns a copy with one pixel replaced; used by gradient checks.
    pub fn with_value(&self, index: usize, value: T) -> Result<Self, MaskError> {
        let mut values = self.values.clone();
        values[index] = value;
        Self::new(self.width, self.height, values)
    }
}

/// Segmentation output in either form accepted by the decision rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T = f64> {
    Mask(BinaryMask),
    Probability(ProbabilityMap<T>),
}

impl<T: Scalar> Prediction<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Prediction::Mask(m) => m.shape(),
            Prediction::Probability(p) => p.shape(),
        }
    }

    /// The binary mask used for localization; probability maps are
    /// thresholded at `theta`, masks pass through unchanged.
    pub fn to_mask(&self, theta: T) -> BinaryMask {
        match self {
            Prediction::Mask(m) => m.clone(),
            Prediction::Probability(p) => binarize(p, theta),
        }
    }
}

impl<T> From<BinaryMask> for Prediction<T> {
    fn from(m: BinaryMask) -> Self {
        Prediction::Mask(m)
    }
}

impl<T> From<ProbabilityMap<T>> for Prediction<T> {
    fn from(p: ProbabilityMap<T>) -> Self {
        Prediction::Probability(p)
    }
}

/// Thresholds a probability map: a pixel is a defect iff `value >= theta`.
pub fn binarize<T: Scalar>(map: &ProbabilityMap<T>, theta: T) -> BinaryMask {
    BinaryMask {
        width: map.width,
        height: map.height,
        pixels: map.values.iter().map(|&v| v >= theta).collect(),
    }
}

/// Pixel-level confusion counts for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PixelConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelConfusion {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    /// `tp + fp + fn`, the pixel union of ground truth and prediction.
    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    pub fn total(&self) -> u64 {
        self.union() + self.tn
    }

    /// Ground truth or prediction contains at least one defect pixel.
    pub fn is_relevant(&self) -> bool {
        self.union() > 0
    }

    pub fn gt_positive(&self) -> bool {
        self.tp + self.fn_ > 0
    }

    pub fn pred_positive(&self) -> bool {
        self.tp + self.fp > 0
    }

    /// Confusion with the roles of ground truth and prediction exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tn,
        }
    }
}

impl Add for PixelConfusion {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
            tn: self.tn + rhs.tn,
        }
    }
}

impl AddAssign for PixelConfusion {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sum for PixelConfusion {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn ensure_same_shape(gt: (usize, usize), pred: (usize, usize)) -> Result<(), MaskError> {
    if gt != pred {
        return Err(MaskError::ShapeMismatch {
            gt_width: gt.0,
            gt_height: gt.1,
            pred_width: pred.0,
            pred_height: pred.1,
        });
    }
    Ok(())
}

/// Exact pixel confusion between a ground-truth and a predicted mask.
pub fn pixel_confusion(gt: &BinaryMask, pred: &BinaryMask) -> Result<PixelConfusion, MaskError> {
    ensure_same_shape(gt.shape(), pred.shape())?;
    // Index 2*gt + pred into a four-slot histogram: tn, fp, fn, tp.
    let mut bins = [0u64; 4];
    for (&g, &p) in gt.pixels.iter().zip(&pred.pixels) {
        bins[((g as usize) << 1) | p as usize] += 1;
    }
    Ok(PixelConfusion {
        tn: bins[0],
        fp: bins[1],
        fn_: bins[2],
        tp: bins[3],
    })
}

/// Per-sample IoU `tp / (tp + fp + fn)`.
///
/// `None` for a pure true-negative sample, where the ratio is 0/0. This is a
/// value, not an error: such samples are excluded from the sample average
/// rather than scored with an arbitrary constant.
pub fn iou<T: Scalar>(c: &PixelConfusion) -> Option<T> {
    let union = c.union();
    (union > 0).then(|| T::from_count(c.tp) / T::from_count(union))
}

//! Sample-level decisions `ŷ = [Φ(S) ≥ τ]` and the classification metrics
//! built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, Prediction};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecisionError {
    #[error("binarization threshold theta must lie in [0, 1], got {0}")]
    ThetaOutOfRange(f64),
    #[error("tau for {statistic} must lie in [0, 1], got {tau}")]
    TauOutOfUnitRange { statistic: Statistic, tau: f64 },
    #[error("tau for {statistic} must be a nonnegative integer, got {tau}")]
    TauNotCount { statistic: Statistic, tau: f64 },
    #[error("no samples to evaluate")]
    EmptySamples,
    #[error("tau grid is empty")]
    EmptyGrid,
    #[error("tau grid must be strictly ascending (position {index}: {value} follows {previous})")]
    UnsortedGrid {
        index: usize,
        previous: f64,
        value: f64,
    },
    #[error("unknown statistic {0:?} (expected count, fraction, max-component or max-prob)")]
    UnknownStatistic(String),
}

/// The statistic Φ reducing a segmentation output to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    #[default]
    PositivePixelCount,
    PositivePixelFraction,
    MaxComponentArea,
    MaxProbability,
}

impl Statistic {
    pub fn name(self) -> &'static str {
        match self {
            Statistic::PositivePixelCount => "positive_pixel_count",
            Statistic::PositivePixelFraction => "positive_pixel_fraction",
            Statistic::MaxComponentArea => "max_component_area",
            Statistic::MaxProbability => "max_probability",
        }
    }

    fn unit_range(self) -> bool {
        matches!(
            self,
            Statistic::PositivePixelFraction | Statistic::MaxProbability
        )
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = DecisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "count" | "positive_pixel_count" => Ok(Statistic::PositivePixelCount),
            "fraction" | "positive_pixel_fraction" => Ok(Statistic::PositivePixelFraction),
            "max_component" | "max_component_area" => Ok(Statistic::MaxComponentArea),
            "max_prob" | "max_probability" => Ok(Statistic::MaxProbability),
            _ => Err(DecisionError::UnknownStatistic(s.to_string())),
        }
    }
}

/// Φ, τ and the pixel binarization threshold θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRule<T = f64> {
    statistic: Statistic,
    tau: T,
    theta: T,
}

impl<T: Scalar> DecisionRule<T> {
    pub fn new(statistic: Statistic, tau: T, theta: T) -> Result<Self, DecisionError> {
        if !(theta >= T::zero() && theta <= T::one()) {
            return Err(DecisionError::ThetaOutOfRange(theta.as_f64()));
        }
        if statistic.unit_range() {
            if !(tau >= T::zero() && tau <= T::one()) {
                return Err(DecisionError::TauOutOfUnitRange {
                    statistic,
                    tau: tau.as_f64(),
                });
            }
        } else if !(tau >= T::zero() && tau.is_finite() && tau.fract() == T::zero()) {
            return Err(DecisionError::TauNotCount {
                statistic,
                tau: tau.as_f64(),
            });
        }
        Ok(Self {
            statistic,
            tau,
            theta,
        })
    }

    pub fn statistic(&self) -> Statistic {
        self.statistic
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn theta(&self) -> T {
        self.theta
    }
}

impl<T: Scalar> Default for DecisionRule<T> {
    /// Any predicted defect pixel (at θ = 0.5) flags the sample.
    fn default() -> Self {
        Self {
            statistic: Statistic::PositivePixelCount,
            tau: T::one(),
            theta: T::lit(0.5),
        }
    }
}

/// Φ evaluated on an already binarized mask. `MaxProbability` of a mask is 1
/// if any pixel is set, else 0.
pub fn phi_mask<T: Scalar>(mask: &BinaryMask, statistic: Statistic) -> T {
    match statistic {
        Statistic::PositivePixelCount => T::from_count(mask.count()),
        Statistic::PositivePixelFraction => {
            T::from_count(mask.count()) / T::from_count(mask.len() as u64)
        }
        Statistic::MaxComponentArea => T::from_count(mask.max_component_area()),
        Statistic::MaxProbability => {
            if mask.any() {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Φ of a segmentation output. Pixel statistics run on the mask binarized at
/// the rule's θ; `MaxProbability` reads the raw map.
pub fn phi<T: Scalar>(pred: &Prediction<T>, rule: &DecisionRule<T>) -> T {
    match (pred, rule.statistic) {
        (Prediction::Probability(p), Statistic::MaxProbability) => p.max_value(),
        (Prediction::Mask(m), s) => phi_mask(m, s),
        (p, s) => phi_mask(&p.to_mask(rule.theta), s),
    }
}

pub fn decide<T: Scalar>(pred: &Prediction<T>, rule: &DecisionRule<T>) -> bool {
    phi(pred, rule) >= rule.tau
}

/// Sample-level 2×2 confusion of `(y, ŷ)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl SampleConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, y: bool, y_hat: bool) {
        match (y, y_hat) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

pub fn sample_confusion(
    labels: impl IntoIterator<Item = (bool, bool)>,
) -> Result<SampleConfusion, DecisionError> {
    let mut c = SampleConfusion::default();
    for (y, y_hat) in labels {
        c.record(y, y_hat);
    }
    if c.total() == 0 {
        return Err(DecisionError::EmptySamples);
    }
    Ok(c)
}

/// `(tp + tn) / total`.
pub fn seg_accuracy<T: Scalar>(c: &SampleConfusion) -> Result<T, DecisionError> {
    if c.total() == 0 {
        return Err(DecisionError::EmptySamples);
    }
    Ok(T::from_count(c.tp + c.tn) / T::from_count(c.total()))
}

/// `tp / (tp + fn)`; `None` without positive samples.
pub fn seg_recall<T: Scalar>(c: &SampleConfusion) -> Option<T> {
    let positives = c.tp + c.fn_;
    (positives > 0).then(|| T::from_count(c.tp) / T::from_count(positives))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow<T = f64> {
    pub tau: T,
    pub confusion: SampleConfusion,
    pub seg_accuracy: T,
    pub seg_recall: Option<T>,
}

/// Re-decides every sample at each τ of an ascending grid. Φ is computed
/// once per sample by the caller and passed in as `(y, Φ)` pairs.
pub fn threshold_sweep<T: Scalar>(
    samples: &[(bool, T)],
    tau_grid: &[T],
) -> Result<Vec<SweepRow<T>>, DecisionError> {
    if tau_grid.is_empty() {
        return Err(DecisionError::EmptyGrid);
    }
    if samples.is_empty() {
        return Err(DecisionError::EmptySamples);
    }
    for (i, w) in tau_grid.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(DecisionError::UnsortedGrid {
                index: i + 1,
                previous: w[0].as_f64(),
                value: w[1].as_f64(),
            });
        }
    }
    tau_grid
        .iter()
        .map(|&tau| {
            let confusion = sample_confusion(samples.iter().map(|&(y, v)| (y, v >= tau)))?;
            Ok(SweepRow {
                tau,
                confusion,
                seg_accuracy: seg_accuracy(&confusion)?,
                seg_recall: seg_recall(&confusion),
            })
        })
        .collect()
}

/// Parses `start:stop:step` into an inclusive ascending grid.
pub fn parse_tau_range(range: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = range.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(format!("expected start:stop:step, got {range:?}"));
    };
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|e| format!("invalid number {s:?} in {range:?}: {e}"))
    };
    let (start, stop, step) = (parse(start)?, parse(stop)?, parse(step)?);
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(format!("tau range {range:?} must satisfy start <= stop and step > 0"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::ProbabilityMap;

    fn count_rule(tau: f64) -> DecisionRule {
        DecisionRule::new(Statistic::PositivePixelCount, tau, 0.5).unwrap()
    }

    fn mask_with(n: usize) -> Prediction {
        let mut i = 0;
        Prediction::Mask(
            BinaryMask::from_fn(10, 10, |_, _| {
                i += 1;
                i <= n
            })
            .unwrap(),
        )
    }

    #[test]
    fn rule_validation() {
        assert!(DecisionRule::new(Statistic::PositivePixelCount, 1.5, 0.5).is_err());
        assert!(DecisionRule::new(Statistic::MaxComponentArea, -1.0, 0.5).is_err());
        assert!(DecisionRule::new(Statistic::MaxComponentArea, 12.0, 0.5).is_ok());
        assert!(DecisionRule::new(Statistic::PositivePixelFraction, 1.5, 0.5).is_err());
        assert!(DecisionRule::new(Statistic::MaxProbability, 0.9, 0.5).is_ok());
        assert!(matches!(
            DecisionRule::new(Statistic::MaxProbability, 0.9, 1.1),
            Err(DecisionError::ThetaOutOfRange(_))
        ));
        let d: DecisionRule = DecisionRule::default();
        assert_eq!(d.statistic(), Statistic::PositivePixelCount);
        assert_eq!(d.tau(), 1.0);
    }

    #[test]
    fn statistic_names_parse() {
        for s in [
            Statistic::PositivePixelCount,
            Statistic::PositivePixelFraction,
            Statistic::MaxComponentArea,
            Statistic::MaxProbability,
        ] {
            assert_eq!(s.name().parse::<Statistic>().unwrap(), s);
        }
        assert_eq!("max-prob".parse::<Statistic>().unwrap(), Statistic::MaxProbability);
        assert!("median".parse::<Statistic>().is_err());
    }

    #[test]
    fn phi_examples() {
        let rule = count_rule(1.0);
        assert_eq!(phi(&mask_with(0), &rule), 0.0);
        let diag = BinaryMask::from_fn(4, 4, |x, y| (x, y) == (1, 1) || (x, y) == (2, 2)).unwrap();
        assert_eq!(phi_mask::<f64>(&diag, Statistic::MaxComponentArea), 2.0);
        let p = ProbabilityMap::new(2, 2, vec![0.1, 0.83, 0.2, 0.0]).unwrap();
        let rule = DecisionRule::new(Statistic::MaxProbability, 0.5, 0.5).unwrap();
        assert_eq!(phi(&Prediction::Probability(p.clone()), &rule), 0.83);
        assert_eq!(phi(&mask_with(3), &rule), 1.0);
        // Pixel statistics see the binarized map.
        assert_eq!(phi(&Prediction::Probability(p), &count_rule(1.0)), 1.0);
    }

    #[test]
    fn fraction_is_count_over_area() {
        for n in [0, 1, 7, 33, 100] {
            let pred = mask_with(n);
            let frac = DecisionRule::new(Statistic::PositivePixelFraction, 0.5, 0.5).unwrap();
            assert_eq!(phi(&pred, &frac), phi(&pred, &count_rule(1.0)) / 100.0);
        }
    }

    #[test]
    fn decide_examples() {
        assert!(!decide(&mask_with(0), &count_rule(1.0)));
        assert!(decide(&mask_with(1), &count_rule(1.0)));
        assert!(!decide(&mask_with(49), &count_rule(50.0)));
        assert!(decide(&mask_with(50), &count_rule(50.0)));
    }

    #[test]
    fn sample_confusion_examples() {
        let all = sample_confusion(vec![(true, true); 5]).unwrap();
        assert_eq!(all, SampleConfusion { tp: 5, ..Default::default() });
        let one_each =
            sample_confusion([(true, true), (true, false), (false, false), (false, true)]).unwrap();
        assert_eq!(one_each, SampleConfusion { tp: 1, tn: 1, fp: 1, fn_: 1 });
        assert_eq!(sample_confusion([]), Err(DecisionError::EmptySamples));
    }

    #[test]
    fn thousand_sample_example() {
        let mut labels = Vec::new();
        labels.extend((0..110).map(|i| (true, i < 94)));
        labels.extend((0..894).map(|i| (false, i < 57)));
        let c = sample_confusion(labels).unwrap();
        assert_eq!(c, SampleConfusion { tp: 94, tn: 837, fp: 57, fn_: 16 });
        let acc: f64 = seg_accuracy(&c).unwrap();
        assert_eq!(acc, 931.0 / 1004.0);
        assert!((acc - 0.9273).abs() < 1e-4);
        let rec: f64 = seg_recall(&c).unwrap();
        assert!((rec - 0.8545).abs() < 1e-4);
    }

    #[test]
    fn accuracy_and_recall_edges() {
        let c = SampleConfusion { tp: 1, tn: 1, fp: 1, fn_: 1 };
        assert_eq!(seg_accuracy::<f64>(&c).unwrap(), 0.5);
        assert_eq!(
            seg_accuracy::<f64>(&SampleConfusion::default()),
            Err(DecisionError::EmptySamples)
        );
        assert_eq!(seg_recall::<f64>(&SampleConfusion { tp: 3, tn: 2, ..Default::default() }), Some(1.0));
        assert_eq!(seg_recall::<f64>(&SampleConfusion { tn: 2, fp: 1, ..Default::default() }), None);
    }

    #[test]
    fn sweep_edges() {
        let samples = [(true, 3.0), (false, 0.0), (true, 0.0), (false, 5.0)];
        let rows = threshold_sweep(&samples, &[0.0]).unwrap();
        assert_eq!(rows[0].seg_recall, Some(1.0));
        let rows = threshold_sweep(&samples, &[0.0, 1.0, 6.0]).unwrap();
        assert_eq!(rows[1].seg_recall, Some(0.5));
        assert_eq!(rows[2].seg_recall, Some(0.0));
        assert_eq!(rows[2].confusion.tn, 2);
        let negatives = [(false, 3.0)];
        assert_eq!(threshold_sweep(&negatives, &[10.0]).unwrap()[0].seg_recall, None);
        assert_eq!(threshold_sweep(&samples, &[]), Err(DecisionError::EmptyGrid));
        assert!(matches!(
            threshold_sweep(&samples, &[1.0, 1.0]),
            Err(DecisionError::UnsortedGrid { index: 1, .. })
        ));
    }

    #[test]
    fn tau_range_parsing() {
        assert_eq!(parse_tau_range("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_tau_range("1:10:3").unwrap(), vec![1.0, 4.0, 7.0, 10.0]);
        assert!(parse_tau_range("1:0:1").is_err());
        assert!(parse_tau_range("0:1").is_err());
        assert!(parse_tau_range("0:1:0").is_err());
    }
}

//! Dataset-level localization metrics.
//!
//! Two averages over per-sample IoU are provided. [`pooled_miou`] sums the
//! confusion counts of every sample before dividing, which weights each
//! sample by its pixel union. [`sample_miou`] averages the per-sample IoU of
//! the relevant samples only, so every defective workpiece counts once and
//! pure true negatives cannot move the score.
//!
//! All floating-point reductions run in ascending sample-id order, so the
//! result is bitwise independent of record order and of how the records were
//! produced.

use std::collections::HashSet;

use thiserror::Error;

use crate::mask::{iou, PixelConfusion};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cannot compute a metric over an empty record set")]
    EmptyRecords,
    #[error("sample weight for {id:?} must be positive and finite, got {weight}")]
    InvalidWeight { id: String, weight: f64 },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
}

/// One evaluated sample: its pixel confusion plus the quantities derived
/// from it. Derived fields are computed on construction and cannot drift.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T = f64> {
    id: String,
    confusion: PixelConfusion,
    iou: Option<T>,
    weight: T,
}

impl<T: Scalar> SampleRecord<T> {
    pub fn new(id: impl Into<String>, confusion: PixelConfusion) -> Self {
        Self {
            id: id.into(),
            iou: iou(&confusion),
            confusion,
            weight: T::one(),
        }
    }

    pub fn with_weight(mut self, weight: T) -> Result<Self, MetricsError> {
        if !(weight > T::zero() && weight.is_finite()) {
            return Err(MetricsError::InvalidWeight {
                id: self.id,
                weight: weight.to_f64().unwrap_or(f64::NAN),
            });
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn confusion(&self) -> &PixelConfusion {
        &self.confusion
    }

    pub fn iou(&self) -> Option<T> {
        self.iou
    }

    /// Ground truth or prediction has at least one defect pixel.
    pub fn relevant(&self) -> bool {
        self.confusion.is_relevant()
    }

    /// Sample-level ground-truth label `y_i`.
    pub fn gt_positive(&self) -> bool {
        self.confusion.gt_positive()
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    /// Neither ground truth nor prediction contains a defect pixel.
    pub fn is_pure_true_negative(&self) -> bool {
        !self.relevant()
    }
}

/// Output of [`sample_miou`]: both localization averages plus the sample
/// bookkeeping needed to interpret them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSummary<T = f64> {
    pub pooled_miou: Option<T>,
    pub sample_miou: Option<T>,
    /// Number of relevant samples.
    pub m_eff: u64,
    pub m_total: u64,
    /// Fraction of samples that are pure true negatives.
    pub tn_ratio: T,
}

/// How [`naive_sample_miou`] scores samples whose IoU is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyPolicy {
    ScoreOne,
    ScoreZero,
    Skip,
}

fn ensure_nonempty<T>(records: &[SampleRecord<T>]) -> Result<(), MetricsError> {
    if records.is_empty() {
        Err(MetricsError::EmptyRecords)
    } else {
        Ok(())
    }
}

/// Records sorted by id; rejects duplicate ids since they would make the
/// reduction order ambiguous.
fn id_ordered<T>(records: &[SampleRecord<T>]) -> Result<Vec<&SampleRecord<T>>, MetricsError> {
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_unstable_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(MetricsError::DuplicateId(w[0].id.clone()));
    }
    Ok(sorted)
}

/// `Σ tp / Σ (tp + fp + fn)` over all records; `None` when no sample has a
/// defect pixel in either mask.
pub fn pooled_miou<T: Scalar>(records: &[SampleRecord<T>]) -> Result<Option<T>, MetricsError> {
    ensure_nonempty(records)?;
    let total: PixelConfusion = records.iter().map(|r| r.confusion).sum();
    Ok(iou(&total))
}

/// Macro-average of per-sample IoU over relevant samples, together with the
/// pooled figure and the true-negative ratio.
pub fn sample_miou<T: Scalar>(
    records: &[SampleRecord<T>],
) -> Result<LocalizationSummary<T>, MetricsError> {
    ensure_nonempty(records)?;
    let ordered = id_ordered(records)?;
    let mut sum = T::zero();
    let mut m_eff = 0u64;
    for r in ordered.iter().filter(|r| r.relevant()) {
        sum = sum + r.iou.expect("relevant record has an IoU");
        m_eff += 1;
    }
    let m_total = records.len() as u64;
    Ok(LocalizationSummary {
        pooled_miou: pooled_miou(records)?,
        sample_miou: (m_eff > 0).then(|| sum / T::from_count(m_eff)),
        m_eff,
        m_total,
        tn_ratio: T::from_count(m_total - m_eff) / T::from_count(m_total),
    })
}

/// Equal-weight average over all samples with undefined IoUs scored by
/// `policy`. Its value depends on how many pure true negatives the dataset
/// holds, which is why [`sample_miou`] is the reported figure; this one
/// exists to demonstrate that sensitivity.
///
/// With [`EmptyPolicy::Skip`] and no relevant sample the result is 0.
pub fn naive_sample_miou<T: Scalar>(
    records: &[SampleRecord<T>],
    policy: EmptyPolicy,
) -> Result<T, MetricsError> {
    ensure_nonempty(records)?;
    let ordered = id_ordered(records)?;
    let mut sum = T::zero();
    let mut count = 0u64;
    for r in ordered {
        let score = match (r.iou, policy) {
            (Some(v), _) => v,
            (None, EmptyPolicy::ScoreOne) => T::one(),
            (None, EmptyPolicy::ScoreZero) => T::zero(),
            (None, EmptyPolicy::Skip) => continue,
        };
        sum = sum + score;
        count += 1;
    }
    Ok(if count == 0 {
        T::zero()
    } else {
        sum / T::from_count(count)
    })
}

/// `Σ w_i·IoU_i / Σ w_i` over relevant samples.
pub fn weighted_sample_miou<T: Scalar>(
    records: &[SampleRecord<T>],
) -> Result<Option<T>, MetricsError> {
    ensure_nonempty(records)?;
    let ordered = id_ordered(records)?;
    let mut num = T::zero();
    let mut den = T::zero();
    for r in ordered.iter().filter(|r| r.relevant()) {
        num = num + r.weight * r.iou.expect("relevant record has an IoU");
        den = den + r.weight;
    }
    Ok((den > T::zero()).then(|| num / den))
}

/// Ids that appear more than once, in first-seen order.
pub fn duplicate_ids<T>(records: &[SampleRecord<T>]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for r in records {
        if !seen.insert(r.id.as_str()) && !dups.contains(&r.id) {
            dups.push(r.id.clone());
        }
    }
    dups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, tp: u64, fp: u64, fn_: u64) -> SampleRecord {
        SampleRecord::new(id, PixelConfusion::new(tp, fp, fn_, 100))
    }

    fn dilution() -> Vec<SampleRecord> {
        vec![rec("a", 1000, 0, 0), rec("b", 0, 0, 50)]
    }

    fn with_tn(mut base: Vec<SampleRecord>, k: usize) -> Vec<SampleRecord> {
        for i in 0..k {
            base.push(rec(&format!("tn{i:04}"), 0, 0, 0));
        }
        base
    }

    #[test]
    fn record_derives_flags() {
        let r = rec("x", 0, 3, 0);
        assert!(r.relevant());
        assert!(!r.gt_positive());
        assert_eq!(r.iou(), Some(0.0));
        let tn = rec("y", 0, 0, 0);
        assert!(!tn.relevant());
        assert!(tn.is_pure_true_negative());
        assert_eq!(tn.iou(), None);
        assert!(rec("z", 0, 0, 4).gt_positive());
    }

    #[test]
    fn weight_validation() {
        assert!(matches!(
            rec("a", 1, 0, 0).with_weight(0.0),
            Err(MetricsError::InvalidWeight { .. })
        ));
        assert!(rec("a", 1, 0, 0).with_weight(-1.0).is_err());
        assert!(rec("a", 1, 0, 0).with_weight(f64::NAN).is_err());
        assert_eq!(rec("a", 1, 0, 0).with_weight(2.5).unwrap().weight(), 2.5);
    }

    #[test]
    fn pooled_dilution_example() {
        let p = pooled_miou(&dilution()).unwrap().unwrap();
        assert_eq!(p, 1000.0 / 1050.0);
        assert!((p - 0.95238).abs() < 1e-5);
    }

    #[test]
    fn pooled_perfect_and_degenerate() {
        let perfect = vec![rec("a", 10, 0, 0), rec("b", 0, 0, 0), rec("c", 3, 0, 0)];
        assert_eq!(pooled_miou(&perfect).unwrap(), Some(1.0));
        let all_tn = vec![rec("a", 0, 0, 0), rec("b", 0, 0, 0)];
        assert_eq!(pooled_miou(&all_tn).unwrap(), None);
        assert_eq!(
            pooled_miou::<f64>(&[]).unwrap_err(),
            MetricsError::EmptyRecords
        );
    }

    #[test]
    fn sample_miou_dilution_example() {
        let s = sample_miou(&dilution()).unwrap();
        assert_eq!(s.sample_miou, Some(0.5));
        assert_eq!(s.m_eff, 2);
        assert_eq!(s.m_total, 2);
        assert_eq!(s.tn_ratio, 0.0);
        assert_eq!(s.pooled_miou, Some(1000.0 / 1050.0));
    }

    #[test]
    fn sample_miou_ignores_injected_negatives() {
        let base = sample_miou(&dilution()).unwrap();
        let injected = sample_miou(&with_tn(dilution(), 100)).unwrap();
        assert_eq!(injected.sample_miou, base.sample_miou);
        assert_eq!(injected.m_eff, base.m_eff);
        assert_eq!(injected.pooled_miou, base.pooled_miou);
        assert_eq!(injected.m_total, 102);
        assert!(injected.tn_ratio > base.tn_ratio);
        assert_eq!(injected.tn_ratio, 100.0 / 102.0);
    }

    #[test]
    fn sample_miou_singleton() {
        let r = SampleRecord::new("a", PixelConfusion::new(37, 63, 0, 0));
        assert_eq!(sample_miou(&[r]).unwrap().sample_miou, Some(0.37));
    }

    #[test]
    fn sample_miou_all_negative() {
        let s = sample_miou(&with_tn(vec![], 3)).unwrap();
        assert_eq!(s.sample_miou, None);
        assert_eq!(s.pooled_miou, None);
        assert_eq!(s.m_eff, 0);
        assert_eq!(s.tn_ratio, 1.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let recs = vec![rec("a", 1, 0, 0), rec("a", 0, 1, 0)];
        assert_eq!(
            sample_miou(&recs).unwrap_err(),
            MetricsError::DuplicateId("a".into())
        );
        assert_eq!(duplicate_ids(&recs), vec!["a".to_string()]);
    }

    #[test]
    fn naive_policies() {
        let recs = with_tn(dilution(), 2);
        assert_eq!(naive_sample_miou(&recs, EmptyPolicy::ScoreOne).unwrap(), 0.75);
        assert_eq!(naive_sample_miou(&recs, EmptyPolicy::Skip).unwrap(), 0.5);
        assert_eq!(naive_sample_miou(&recs, EmptyPolicy::ScoreZero).unwrap(), 0.25);
        assert!(naive_sample_miou::<f64>(&[], EmptyPolicy::Skip).is_err());
    }

    #[test]
    fn weighted_examples() {
        let recs = vec![
            rec("a", 5, 0, 0).with_weight(3.0).unwrap(),
            rec("b", 0, 0, 5).with_weight(1.0).unwrap(),
            rec("c", 0, 0, 0).with_weight(50.0).unwrap(),
        ];
        assert_eq!(weighted_sample_miou(&recs).unwrap(), Some(0.75));
        let uniform = with_tn(dilution(), 3);
        assert_eq!(
            weighted_sample_miou(&uniform).unwrap(),
            sample_miou(&uniform).unwrap().sample_miou
        );
        assert_eq!(weighted_sample_miou(&with_tn(vec![], 2)).unwrap(), None);
    }

    #[test]
    fn generic_over_f32() {
        let recs: Vec<SampleRecord<f32>> = vec![
            SampleRecord::new("a", PixelConfusion::new(1000, 0, 0, 0)),
            SampleRecord::new("b", PixelConfusion::new(0, 0, 50, 0)),
        ];
        assert_eq!(sample_miou(&recs).unwrap().sample_miou, Some(0.5f32));
    }
}

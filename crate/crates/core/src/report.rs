//! Metric reports: per-sample rows plus a dataset summary, emitted as JSON or
//! CSV.
//!
//! Real numbers are written with exactly six decimal places and undefined
//! metrics as `null` (JSON) or an empty field (CSV). A report read back from
//! JSON is checked against its own rows before it is returned.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::decision::{
    sample_confusion, seg_accuracy, seg_recall, DecisionError, DecisionRule, Statistic,
};
use crate::mask::PixelConfusion;
use crate::metrics::{sample_miou, weighted_sample_miou, MetricsError, SampleRecord};

/// Largest difference tolerated between a stored (rounded) value and the one
/// recomputed from the rows.
const ROUNDING_SLACK: f64 = 5e-7 + 1e-12;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write report to {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read report {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("report is not self-consistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Decision(#[from] DecisionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?} (expected json or csv)")),
        }
    }
}

fn fixed6(x: f64) -> String {
    format!("{x:.6}")
}

fn ser_real<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    RawValue::from_string(fixed6(*x))
        .map_err(serde::ser::Error::custom)?
        .serialize(s)
}

fn ser_opt_real<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => ser_real(v, s),
        None => s.serialize_none(),
    }
}

fn ser_label<S: Serializer>(b: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(*b as u8)
}

fn de_label<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(serde::de::Error::custom(format!("label must be 0 or 1, got {v}"))),
    }
}

/// The decision rule a report was computed with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleInfo {
    pub statistic: Statistic,
    #[serde(serialize_with = "ser_real")]
    pub tau: f64,
    #[serde(serialize_with = "ser_real")]
    pub theta: f64,
}

impl From<&DecisionRule<f64>> for RuleInfo {
    fn from(r: &DecisionRule<f64>) -> Self {
        Self {
            statistic: r.statistic(),
            tau: r.tau(),
            theta: r.theta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    #[serde(serialize_with = "ser_opt_real")]
    pub iou: Option<f64>,
    pub relevant: bool,
    #[serde(serialize_with = "ser_label", deserialize_with = "de_label")]
    pub y: bool,
    #[serde(serialize_with = "ser_label", deserialize_with = "de_label")]
    pub y_hat: bool,
    #[serde(serialize_with = "ser_real")]
    pub weight: f64,
}

impl SampleRow {
    pub fn confusion(&self) -> PixelConfusion {
        PixelConfusion::new(self.tp, self.fp, self.fn_, self.tn)
    }

    fn record(&self) -> Result<SampleRecord, MetricsError> {
        SampleRecord::new(self.id.clone(), self.confusion()).with_weight(self.weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(serialize_with = "ser_opt_real")]
    pub pooled_miou: Option<f64>,
    #[serde(serialize_with = "ser_opt_real")]
    pub sample_miou: Option<f64>,
    pub m_eff: u64,
    pub m_total: u64,
    #[serde(serialize_with = "ser_real")]
    pub tn_ratio: f64,
    #[serde(serialize_with = "ser_real")]
    pub seg_accuracy: f64,
    #[serde(serialize_with = "ser_opt_real")]
    pub seg_recall: Option<f64>,
    pub rule: RuleInfo,
    pub weights_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleRow>,
    pub summary: Summary,
}

/// One sample's record together with its sample-level decision.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedSample {
    pub record: SampleRecord,
    pub y_hat: bool,
}

fn summarize(
    records: &[SampleRecord],
    decisions: &[(bool, bool)],
    rule: RuleInfo,
    weights_used: bool,
) -> Result<Summary, ReportError> {
    let loc = sample_miou(records)?;
    let sample = if weights_used {
        weighted_sample_miou(records)?
    } else {
        loc.sample_miou
    };
    let cls = sample_confusion(decisions.iter().copied())?;
    Ok(Summary {
        pooled_miou: loc.pooled_miou,
        sample_miou: sample,
        m_eff: loc.m_eff,
        m_total: loc.m_total,
        tn_ratio: loc.tn_ratio,
        seg_accuracy: seg_accuracy(&cls)?,
        seg_recall: seg_recall(&cls),
        rule,
        weights_used,
    })
}

impl MetricReport {
    /// Builds a report with rows in ascending id order. With `weights_used`
    /// the summary's `sample_miou` is the weighted average.
    pub fn build(
        mut samples: Vec<EvaluatedSample>,
        rule: &DecisionRule<f64>,
        weights_used: bool,
    ) -> Result<Self, ReportError> {
        samples.sort_by(|a, b| a.record.id().cmp(b.record.id()));
        let records: Vec<SampleRecord> = samples.iter().map(|s| s.record.clone()).collect();
        let decisions: Vec<(bool, bool)> = samples
            .iter()
            .map(|s| (s.record.gt_positive(), s.y_hat))
            .collect();
        let summary = summarize(&records, &decisions, rule.into(), weights_used)?;
        let per_sample = samples
            .into_iter()
            .map(|s| {
                let c = *s.record.confusion();
                SampleRow {
                    id: s.record.id().to_string(),
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    tn: c.tn,
                    iou: s.record.iou(),
                    relevant: s.record.relevant(),
                    y: s.record.gt_positive(),
                    y_hat: s.y_hat,
                    weight: s.record.weight(),
                }
            })
            .collect();
        Ok(Self {
            per_sample,
            summary,
        })
    }

    /// Summary recomputed from the per-sample rows alone.
    pub fn recompute_summary(&self) -> Result<Summary, ReportError> {
        let records = self
            .per_sample
            .iter()
            .map(SampleRow::record)
            .collect::<Result<Vec<_>, _>>()?;
        let decisions: Vec<(bool, bool)> =
            self.per_sample.iter().map(|r| (r.y, r.y_hat)).collect();
        summarize(
            &records,
            &decisions,
            self.summary.rule,
            self.summary.weights_used,
        )
    }

    /// Checks rows against their counts and the summary against the rows,
    /// allowing `tolerance` on real values.
    pub fn check_consistency(&self, tolerance: f64) -> Result<(), ReportError> {
        let fail = |msg: String| Err(ReportError::Inconsistent(msg));
        for row in &self.per_sample {
            let c = row.confusion();
            if row.relevant != c.is_relevant() {
                return fail(format!("row {}: relevant flag disagrees with counts", row.id));
            }
            if row.y != c.gt_positive() {
                return fail(format!("row {}: y disagrees with counts", row.id));
            }
            let expected = crate::mask::iou::<f64>(&c);
            if !close_opt(row.iou, expected, tolerance) {
                return fail(format!("row {}: iou {:?} but counts give {:?}", row.id, row.iou, expected));
            }
        }
        let s = self.recompute_summary()?;
        let stored = &self.summary;
        let checks = [
            ("pooled_miou", close_opt(stored.pooled_miou, s.pooled_miou, tolerance)),
            ("sample_miou", close_opt(stored.sample_miou, s.sample_miou, tolerance)),
            ("m_eff", stored.m_eff == s.m_eff),
            ("m_total", stored.m_total == s.m_total),
            ("tn_ratio", close(stored.tn_ratio, s.tn_ratio, tolerance)),
            ("seg_accuracy", close(stored.seg_accuracy, s.seg_accuracy, tolerance)),
            ("seg_recall", close_opt(stored.seg_recall, s.seg_recall, tolerance)),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return fail(format!("summary field {name} does not match the per-sample rows"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a JSON report and verifies it against its own rows.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let report: MetricReport = serde_json::from_str(text)?;
        report.check_consistency(ROUNDING_SLACK)?;
        Ok(report)
    }

    pub fn read_json(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn per_sample_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(PER_SAMPLE_COLUMNS)?;
        for r in &self.per_sample {
            w.write_record([
                r.id.clone(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
                r.tn.to_string(),
                opt_field(r.iou),
                r.relevant.to_string(),
                (r.y as u8).to_string(),
                (r.y_hat as u8).to_string(),
                fixed6(r.weight),
            ])?;
        }
        csv_string(w)
    }

    pub fn summary_csv(&self) -> Result<String, ReportError> {
        let s = &self.summary;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SUMMARY_COLUMNS)?;
        w.write_record([
            opt_field(s.pooled_miou),
            opt_field(s.sample_miou),
            s.m_eff.to_string(),
            s.m_total.to_string(),
            fixed6(s.tn_ratio),
            fixed6(s.seg_accuracy),
            opt_field(s.seg_recall),
            s.rule.statistic.to_string(),
            fixed6(s.rule.tau),
            fixed6(s.rule.theta),
            s.weights_used.to_string(),
        ])?;
        csv_string(w)
    }
}

pub const PER_SAMPLE_COLUMNS: [&str; 10] = [
    "id", "tp", "fp", "fn", "tn", "iou", "relevant", "y", "y_hat", "weight",
];

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "pooled_miou",
    "sample_miou",
    "m_eff",
    "m_total",
    "tn_ratio",
    "seg_accuracy",
    "seg_recall",
    "statistic",
    "tau",
    "theta",
    "weights_used",
];

fn opt_field(x: Option<f64>) -> String {
    x.map(fixed6).unwrap_or_default()
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = w
        .into_inner()
        .map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn close_opt(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b, tol),
        (None, None) => true,
        _ => false,
    }
}

/// Where the summary table of a CSV report goes: `report.csv` becomes
/// `report.summary.csv`.
pub fn summary_csv_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}.summary.csv"))
}

fn write(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `report` to `path`. CSV output produces two files: the per-sample
/// table at `path` and the one-row summary at [`summary_csv_path`].
pub fn emit_report(report: &MetricReport, format: ReportFormat, path: &Path) -> Result<(), ReportError> {
    match format {
        ReportFormat::Json => write(path, &report.to_json()?),
        ReportFormat::Csv => {
            write(path, &report.per_sample_csv()?)?;
            write(&summary_csv_path(path), &report.summary_csv()?)
        }
    }
}

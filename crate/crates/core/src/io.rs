//! Mask files, dataset pairing and whole-dataset evaluation.
//!
//! 8-bit single-channel images are binary masks (`pixel >= 128` is a defect
//! by default). 16-bit single-channel images are probability maps scaled by
//! `1/65535`. Anything with more than one channel is rejected.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::decision::{decide, DecisionRule};
use crate::mask::{pixel_confusion, BinaryMask, MaskError, Prediction, ProbabilityMap};
use crate::metrics::{MetricsError, SampleRecord};
use crate::report::{EvaluatedSample, MetricReport, ReportError};
use crate::synth::{LabeledMask, SimulationRecord};

pub const DEFAULT_BINARY_THRESHOLD: u8 = 128;

const MASK_EXTENSIONS: [&str; 6] = ["png", "tif", "tiff", "pgm", "pnm", "bmp"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("{path}: unsupported bit depth ({detail}); expected 8- or 16-bit")]
    UnsupportedDepth { path: PathBuf, detail: String },
    #[error("{path}: expected a single-channel image, found {channels} channels")]
    MultiChannel { path: PathBuf, channels: u8 },
    #[error("{path}: ground truth must be an 8-bit binary mask")]
    GroundTruthNotBinary { path: PathBuf },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("cannot list directory {path}: {source}")]
    ListDir {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

impl IoError {
    fn unreadable(path: &Path, message: impl ToString) -> Self {
        IoError::Unreadable {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn write(path: &Path, message: impl ToString) -> Self {
        IoError::Write {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

/// A failure attached to one sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFailure {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unpaired files: {}", describe_orphans(gt_only, pred_only, duplicates))]
    Pairing {
        gt_only: Vec<String>,
        pred_only: Vec<String>,
        duplicates: Vec<String>,
    },
    #[error("{} sample(s) failed:\n{}", .0.len(), describe_failures(.0))]
    Samples(Vec<SampleFailure>),
    #[error("dataset contains no samples")]
    EmptyDataset,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

fn describe_orphans(gt_only: &[String], pred_only: &[String], duplicates: &[String]) -> String {
    let mut parts = Vec::new();
    if !gt_only.is_empty() {
        parts.push(format!("ground truth without prediction: {}", gt_only.join(", ")));
    }
    if !pred_only.is_empty() {
        parts.push(format!("prediction without ground truth: {}", pred_only.join(", ")));
    }
    if !duplicates.is_empty() {
        parts.push(format!("ambiguous stems: {}", duplicates.join(", ")));
    }
    parts.join("; ")
}

fn describe_failures(failures: &[SampleFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("  {}: {}", f.id, f.message))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// 8-bit pixels at or above this value are defects.
    pub binary_threshold: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            binary_threshold: DEFAULT_BINARY_THRESHOLD,
        }
    }
}

pub fn load_mask(path: &Path, opts: &LoadOptions) -> Result<Prediction, IoError> {
    let img = image::ImageReader::open(path)
        .map_err(|e| IoError::unreadable(path, e))?
        .with_guessed_format()
        .map_err(|e| IoError::unreadable(path, e))?
        .decode()
        .map_err(|e| IoError::unreadable(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = img.color().channel_count();
    if channels != 1 {
        return Err(IoError::MultiChannel {
            path: path.to_path_buf(),
            channels,
        });
    }
    let shape_err = |e: MaskError| IoError::unreadable(path, e);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let pixels = buf.into_raw().into_iter().map(|v| v >= opts.binary_threshold).collect();
            Ok(Prediction::Mask(BinaryMask::new(w, h, pixels).map_err(shape_err)?))
        }
        DynamicImage::ImageLuma16(buf) => {
            let values = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            Ok(Prediction::Probability(ProbabilityMap::new(w, h, values).map_err(shape_err)?))
        }
        other => Err(IoError::UnsupportedDepth {
            path: path.to_path_buf(),
            detail: format!("{:?}", other.color()),
        }),
    }
}

pub fn load_ground_truth(path: &Path, opts: &LoadOptions) -> Result<BinaryMask, IoError> {
    match load_mask(path, opts)? {
        Prediction::Mask(m) => Ok(m),
        Prediction::Probability(_) => Err(IoError::GroundTruthNotBinary {
            path: path.to_path_buf(),
        }),
    }
}

/// Writes a mask as an 8-bit PNG (0 background, 255 defect).
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), IoError> {
    let raw = mask.pixels().iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer length matches mask");
    buf.save(path).map_err(|e| IoError::write(path, e))
}

/// Writes a probability map as a 16-bit PNG, rounding to the nearest level.
pub fn write_probability_map(path: &Path, map: &ProbabilityMap) -> Result<(), IoError> {
    let raw = map
        .values()
        .iter()
        .map(|&v| (v * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, raw)
            .expect("buffer length matches map");
    buf.save(path).map_err(|e| IoError::write(path, e))
}

/// Writes every mask to `<dir>/<id>.png`, creating `dir` if needed.
pub fn write_dataset(dir: &Path, masks: &[LabeledMask]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::write(dir, e))?;
    masks
        .par_iter()
        .try_for_each(|m| write_mask(&dir.join(format!("{}.png", m.id)), &m.mask))
}

pub fn write_simulation_log(path: &Path, log: &[SimulationRecord]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::write(path, e))?;
    for r in log {
        w.serialize(r).map_err(|e| IoError::write(path, e))?;
    }
    w.flush().map_err(|e| IoError::write(path, e))
}

/// Reads a TOML document into a config struct (synth config, detector
/// profile).
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::unreadable(path, e))?;
    toml::from_str(&text).map_err(|e| IoError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Where a dataset's ground truth and predictions live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetLayout {
    /// Parallel directories paired by file stem, ignoring extensions.
    Directories { gt_dir: PathBuf, pred_dir: PathBuf },
    /// CSV with header `id,gt_path,pred_path`; relative paths resolve
    /// against the manifest's directory.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub gt_path: PathBuf,
    pub pred_path: PathBuf,
}

fn is_mask_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| MASK_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Stem -> path for every mask file in `dir`, plus stems seen more than once.
fn index_dir(dir: &Path) -> Result<(BTreeMap<String, PathBuf>, Vec<String>), IoError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::ListDir {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut index = BTreeMap::new();
    let mut duplicates = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| IoError::ListDir {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !path.is_file() || hidden || !is_mask_file(&path) {
            continue;
        }
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        if index.insert(stem.clone(), path).is_some() {
            duplicates.push(stem);
        }
    }
    Ok((index, duplicates))
}

#[derive(serde::Deserialize)]
struct ManifestRow {
    id: String,
    gt_path: PathBuf,
    pred_path: PathBuf,
}

impl DatasetLayout {
    pub fn directories(gt_dir: impl Into<PathBuf>, pred_dir: impl Into<PathBuf>) -> Self {
        DatasetLayout::Directories {
            gt_dir: gt_dir.into(),
            pred_dir: pred_dir.into(),
        }
    }

    /// Resolves the layout into id-sorted pairs. Every orphan and ambiguous
    /// stem is reported, not just the first.
    pub fn pairs(&self) -> Result<Vec<SamplePair>, EvalError> {
        match self {
            DatasetLayout::Directories { gt_dir, pred_dir } => {
                let (gt, mut duplicates) = index_dir(gt_dir)?;
                let (pred, pred_dups) = index_dir(pred_dir)?;
                duplicates.extend(pred_dups);
                let gt_only: Vec<String> =
                    gt.keys().filter(|k| !pred.contains_key(*k)).cloned().collect();
                let pred_only: Vec<String> =
                    pred.keys().filter(|k| !gt.contains_key(*k)).cloned().collect();
                if !gt_only.is_empty() || !pred_only.is_empty() || !duplicates.is_empty() {
                    duplicates.sort();
                    duplicates.dedup();
                    return Err(EvalError::Pairing {
                        gt_only,
                        pred_only,
                        duplicates,
                    });
                }
                Ok(gt
                    .into_iter()
                    .map(|(id, gt_path)| SamplePair {
                        pred_path: pred[&id].clone(),
                        id,
                        gt_path,
                    })
                    .collect())
            }
            DatasetLayout::Manifest(path) => {
                let base = path.parent().unwrap_or(Path::new("."));
                let mut reader =
                    csv::Reader::from_path(path).map_err(|e| IoError::unreadable(path, e))?;
                let mut pairs = Vec::new();
                for row in reader.deserialize::<ManifestRow>() {
                    let row = row.map_err(|e| IoError::unreadable(path, e))?;
                    pairs.push(SamplePair {
                        id: row.id,
                        gt_path: base.join(row.gt_path),
                        pred_path: base.join(row.pred_path),
                    });
                }
                pairs.sort_by(|a, b| a.id.cmp(&b.id));
                let mut duplicates: Vec<String> = pairs
                    .windows(2)
                    .filter(|w| w[0].id == w[1].id)
                    .map(|w| w[0].id.clone())
                    .collect();
                duplicates.dedup();
                if !duplicates.is_empty() {
                    return Err(EvalError::Pairing {
                        gt_only: vec![],
                        pred_only: vec![],
                        duplicates,
                    });
                }
                Ok(pairs)
            }
        }
    }
}

/// Per-id sample weights read from a CSV with header `id,weight`.
pub fn load_weights(path: &Path) -> Result<HashMap<String, f64>, IoError> {
    #[derive(serde::Deserialize)]
    struct Row {
        id: String,
        weight: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| IoError::unreadable(path, e))?;
    let mut out = HashMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| IoError::unreadable(path, e))?;
        if out.insert(row.id.clone(), row.weight).is_some() {
            return Err(IoError::unreadable(path, format!("duplicate id {:?}", row.id)));
        }
    }
    Ok(out)
}

/// Confusion, IoU and decision for one ground-truth / prediction pair.
/// Probability maps are binarized once at the rule's θ for localization.
pub fn evaluate_sample(
    id: &str,
    gt: &BinaryMask,
    pred: &Prediction,
    rule: &DecisionRule,
) -> Result<EvaluatedSample, MaskError> {
    let confusion = match pred {
        Prediction::Mask(m) => pixel_confusion(gt, m)?,
        Prediction::Probability(p) => pixel_confusion(gt, &crate::mask::binarize(p, rule.theta()))?,
    };
    Ok(EvaluatedSample {
        record: SampleRecord::new(id, confusion),
        y_hat: decide(pred, rule),
    })
}

fn apply_weights(
    samples: &mut [EvaluatedSample],
    weights: Option<&HashMap<String, f64>>,
) -> Result<(), EvalError> {
    let Some(weights) = weights else {
        return Ok(());
    };
    let known: std::collections::HashSet<&str> = samples.iter().map(|s| s.record.id()).collect();
    let mut unknown: Vec<&String> = weights.keys().filter(|k| !known.contains(k.as_str())).collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(EvalError::Weights(format!(
            "weights given for unknown samples: {}",
            unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    for s in samples.iter_mut() {
        if let Some(&w) = weights.get(s.record.id()) {
            s.record = s.record.clone().with_weight(w)?;
        }
    }
    Ok(())
}

fn finish(
    results: Vec<Result<EvaluatedSample, SampleFailure>>,
    rule: &DecisionRule,
    weights: Option<&HashMap<String, f64>>,
) -> Result<MetricReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut failures = Vec::new();
    let mut samples = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(EvalError::Samples(failures));
    }
    apply_weights(&mut samples, weights)?;
    Ok(MetricReport::build(samples, rule, weights.is_some())?)
}

/// Evaluates in-memory ground truth against predictions matched by id.
pub fn evaluate_masks(
    gt: &[LabeledMask],
    pred: &[(String, Prediction)],
    rule: &DecisionRule,
    weights: Option<&HashMap<String, f64>>,
) -> Result<MetricReport, EvalError> {
    let by_id: HashMap<&str, &Prediction> = pred.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let gt_ids: std::collections::HashSet<&str> = gt.iter().map(|g| g.id.as_str()).collect();
    let mut gt_only: Vec<String> = gt
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();
    let mut pred_only: Vec<String> = pred
        .iter()
        .filter(|(id, _)| !gt_ids.contains(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !gt_only.is_empty() || !pred_only.is_empty() {
        gt_only.sort();
        pred_only.sort();
        return Err(EvalError::Pairing {
            gt_only,
            pred_only,
            duplicates: vec![],
        });
    }
    let results = gt
        .par_iter()
        .map(|g| {
            evaluate_sample(&g.id, &g.mask, by_id[g.id.as_str()], rule).map_err(|e| SampleFailure {
                id: g.id.clone(),
                message: e.to_string(),
            })
        })
        .collect();
    finish(results, rule, weights)
}

/// Loads, pairs and evaluates a dataset on the current rayon pool. All
/// per-sample failures are collected before returning.
pub fn evaluate_dataset(
    layout: &DatasetLayout,
    rule: &DecisionRule,
    weights: Option<&HashMap<String, f64>>,
    opts: &LoadOptions,
) -> Result<MetricReport, EvalError> {
    let pairs = layout.pairs()?;
    let results = pairs
        .par_iter()
        .map(|pair| {
            let fail = |message: String| SampleFailure {
                id: pair.id.clone(),
                message,
            };
            let gt = load_ground_truth(&pair.gt_path, opts).map_err(|e| fail(e.to_string()))?;
            let pred = load_mask(&pair.pred_path, opts).map_err(|e| fail(e.to_string()))?;
            evaluate_sample(&pair.id, &gt, &pred, rule).map_err(|e| fail(e.to_string()))
        })
        .collect();
    finish(results, rule, weights)
}

/// `(id, y, Φ)` for every pair, computed once per sample for threshold
/// sweeps. Ids are in ascending order.
pub fn collect_phi(
    layout: &DatasetLayout,
    rule: &DecisionRule,
    opts: &LoadOptions,
) -> Result<Vec<(String, bool, f64)>, EvalError> {
    let pairs = layout.pairs()?;
    if pairs.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let results: Vec<Result<(String, bool, f64), SampleFailure>> = pairs
        .par_iter()
        .map(|pair| {
            let fail = |message: String| SampleFailure {
                id: pair.id.clone(),
                message,
            };
            let gt = load_ground_truth(&pair.gt_path, opts).map_err(|e| fail(e.to_string()))?;
            let pred = load_mask(&pair.pred_path, opts).map_err(|e| fail(e.to_string()))?;
            if gt.shape() != pred.shape() {
                let (gw, gh) = gt.shape();
                let (pw, ph) = pred.shape();
                return Err(fail(format!(
                    "shape mismatch: ground truth is {gw}x{gh}, prediction is {pw}x{ph}"
                )));
            }
            Ok((pair.id.clone(), gt.any(), crate::decision::phi(&pred, rule)))
        })
        .collect();
    let mut failures = Vec::new();
    let mut out = Vec::new();
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(f) => failures.push(f),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(EvalError::Samples(failures))
    }
}

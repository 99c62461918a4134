//! Sample-centric evaluation for binary defect segmentation.
//!
//! Pixel-pooled mIoU lets a few large, well-segmented defects hide missed
//! small ones. This crate computes it alongside the per-sample average over
//! defect-relevant samples, sample-level accuracy and recall of a
//! thresholded decision rule, the joint segmentation/classification loss
//! with analytic gradients, and synthetic datasets that reproduce the
//! dilution effect.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix it to `f64`, which is what reports and the CLI use.

pub mod decision;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod report;
pub mod scalar;
pub mod synth;

pub use decision::{
    decide, phi, phi_mask, sample_confusion, seg_accuracy, seg_recall, threshold_sweep,
    DecisionError, SampleConfusion, Statistic, SweepRow,
};
pub use io::{evaluate_dataset, evaluate_masks, load_mask, DatasetLayout, EvalError, IoError, LoadOptions};
pub use loss::{
    cls_bce, cls_bce_grad, joint_grads, joint_loss, seg_bce, seg_bce_grad, JointLoss, LossError,
};
pub use mask::{binarize, iou, pixel_confusion, BinaryMask, MaskError, PixelConfusion};
pub use metrics::{
    naive_sample_miou, pooled_miou, sample_miou, weighted_sample_miou, EmptyPolicy, MetricsError,
};
pub use report::{emit_report, MetricReport, ReportError, ReportFormat};
pub use scalar::Scalar;
pub use synth::{dilution_scenario, gen_dataset, simulate_predictions, DetectorProfile, LabeledMask, SynthConfig};

pub type ProbabilityMap = mask::ProbabilityMap<f64>;
pub type Prediction = mask::Prediction<f64>;
pub type SampleRecord = metrics::SampleRecord<f64>;
pub type LocalizationSummary = metrics::LocalizationSummary<f64>;
pub type DecisionRule = decision::DecisionRule<f64>;
pub type LossWeights = loss::LossWeights<f64>;
pub type GradientField = loss::GradientField<f64>;

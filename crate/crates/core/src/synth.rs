//! Deterministic synthetic defect datasets and a parametric imperfect
//! detector.
//!
//! Randomness comes from ChaCha8 keyed by the 64-bit seed. Every sample gets
//! its own stream: ground truth for sample `i` draws from stream `i`, the
//! simulated prediction for sample `i` from stream `PREDICTION_STREAM_BASE +
//! i`. Generation is therefore a pure function of `(config, seed)` no matter
//! how the per-sample work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;

pub const PREDICTION_STREAM_BASE: u64 = 1 << 63;

const PLACEMENT_RETRIES: usize = 1000;
const MAX_BLOB_SIDE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("invalid detector profile: {0}")]
    InvalidProfile(String),
    #[error("could not place defect {defect} of sample {sample} after {retries} attempts")]
    Placement {
        sample: String,
        defect: usize,
        retries: usize,
    },
}

/// A mask tagged with its sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledMask {
    pub id: String,
    pub mask: BinaryMask,
}

impl LabeledMask {
    pub fn new(id: impl Into<String>, mask: BinaryMask) -> Self {
        Self {
            id: id.into(),
            mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub num_samples: usize,
    /// Chance that a sample contains defects.
    pub defect_probability: f64,
    /// Inclusive `[min, max]` defect count for a positive sample.
    pub defects_per_positive: [usize; 2],
    /// Tail exponent of the defect-area distribution.
    pub scale_alpha: f64,
    /// Inclusive `[min, max]` defect area in pixels.
    pub area_range: [u64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_samples: 100,
            defect_probability: 0.2,
            defects_per_positive: [1, 3],
            scale_alpha: 2.0,
            area_range: [4, 1024],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image must be at least 1x1, got {}x{}", self.width, self.height));
        }
        if self.num_samples == 0 {
            return bad("num_samples must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.defect_probability) {
            return bad(format!("defect_probability {} outside [0, 1]", self.defect_probability));
        }
        let [dmin, dmax] = self.defects_per_positive;
        if dmin == 0 || dmin > dmax {
            return bad(format!("defects_per_positive [{dmin}, {dmax}] needs 1 <= min <= max"));
        }
        if !(self.scale_alpha > 0.0 && self.scale_alpha.is_finite()) {
            return bad(format!("scale_alpha must be positive, got {}", self.scale_alpha));
        }
        let [amin, amax] = self.area_range;
        let pixels = (self.width * self.height) as u64;
        if amin == 0 || amin > amax || amax > pixels {
            return bad(format!("area_range [{amin}, {amax}] needs 1 <= min <= max <= {pixels}"));
        }
        Ok(())
    }
}

/// Parameters of the simulated segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DetectorProfile {
    /// Defects with fewer pixels are missed with probability `miss_prob_small`.
    pub detect_floor_area: u64,
    pub miss_prob_small: f64,
    /// Radius of the erosion or dilation applied to each detected defect.
    pub boundary_jitter: usize,
    /// Expected number of spurious blobs per image.
    pub false_positive_rate: f64,
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.miss_prob_small) {
            return Err(SynthError::InvalidProfile(format!(
                "miss_prob_small {} outside [0, 1]",
                self.miss_prob_small
            )));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(SynthError::InvalidProfile(format!(
                "false_positive_rate must be nonnegative, got {}",
                self.false_positive_rate
            )));
        }
        Ok(())
    }
}

/// Truncated discrete power law `P(a) ∝ a^-alpha` on `[min, max]`, sampled
/// by inverting its cumulative table.
#[derive(Debug, Clone)]
pub struct PowerLawAreas {
    min: u64,
    cdf: Vec<f64>,
}

impl PowerLawAreas {
    pub fn new(alpha: f64, min: u64, max: u64) -> Result<Self, SynthError> {
        if min == 0 || min > max || !(alpha > 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "power law needs alpha > 0 and 1 <= min <= max, got alpha={alpha} [{min}, {max}]"
            )));
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (min..=max)
            .map(|a| {
                acc += (a as f64).powf(-alpha);
                acc
            })
            .collect();
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        *cdf.last_mut().expect("nonempty support") = 1.0;
        Ok(Self { min, cdf })
    }

    pub fn min(&self) -> u64 {
        self.min
    }

    pub fn max(&self) -> u64 {
        self.min + self.cdf.len() as u64 - 1
    }

    /// `P(A <= a)`.
    pub fn cdf(&self, a: u64) -> f64 {
        if a < self.min {
            0.0
        } else if a >= self.max() {
            1.0
        } else {
            self.cdf[(a - self.min) as usize]
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        self.min + idx as u64
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Relative pixel offsets of one defect: full rows of width `w` plus a
/// contiguous partial row at a random offset, so the area is exactly `area`.
fn defect_shape<R: Rng>(rng: &mut R, area: u64, img_w: usize, img_h: usize) -> Vec<(usize, usize)> {
    let area = area as usize;
    let lo = area.div_ceil(img_h);
    let hi = img_w.min(area);
    let aspect = 4f64.powf(rng.random_range(-1.0..=1.0));
    let w = ((area as f64 * aspect).sqrt().round() as usize).clamp(lo, hi);
    let h = area.div_ceil(w);
    let partial = area - w * (h - 1);
    let offset = rng.random_range(0..=w - partial);
    let ragged_top = rng.random_bool(0.5);
    let mut pixels = Vec::with_capacity(area);
    for row in 0..h {
        let is_partial = if ragged_top { row == 0 } else { row == h - 1 };
        let (start, len) = if is_partial { (offset, partial) } else { (0, w) };
        pixels.extend((start..start + len).map(|x| (x, row)));
    }
    // Transposing keeps the shape valid only if it still fits the image.
    if h <= img_w && w <= img_h && rng.random_bool(0.5) {
        for p in &mut pixels {
            *p = (p.1, p.0);
        }
    }
    pixels
}

fn generate_sample(cfg: &SynthConfig, areas: &PowerLawAreas, index: usize) -> Result<LabeledMask, SynthError> {
    let id = sample_id(index);
    let mut rng = stream_rng(cfg.seed, index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let mut mask = BinaryMask::empty(w, h).expect("validated dimensions");
    if !rng.random_bool(cfg.defect_probability) {
        return Ok(LabeledMask { id, mask });
    }
    let [dmin, dmax] = cfg.defects_per_positive;
    let count = rng.random_range(dmin..=dmax);
    for defect in 0..count {
        let area = areas.sample(&mut rng);
        let shape = defect_shape(&mut rng, area, w, h);
        let bw = shape.iter().map(|p| p.0).max().unwrap() + 1;
        let bh = shape.iter().map(|p| p.1).max().unwrap() + 1;
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let ox = rng.random_range(0..=w - bw);
            let oy = rng.random_range(0..=h - bh);
            // Keep a one-pixel gap so defects stay separate 8-connected components.
            let clear = (oy.saturating_sub(1)..(oy + bh + 1).min(h))
                .all(|y| (ox.saturating_sub(1)..(ox + bw + 1).min(w)).all(|x| !mask.get(x, y)));
            if clear {
                for &(x, y) in &shape {
                    mask.set(ox + x, oy + y, true);
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement {
                sample: id,
                defect,
                retries: PLACEMENT_RETRIES,
            });
        }
    }
    Ok(LabeledMask { id, mask })
}

/// Ground-truth masks for `cfg.num_samples` samples with ids
/// `sample_00000`, `sample_00001`, ...
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledMask>, SynthError> {
    cfg.validate()?;
    let areas = PowerLawAreas::new(cfg.scale_alpha, cfg.area_range[0], cfg.area_range[1])?;
    (0..cfg.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, &areas, i))
        .collect()
}

/// What the simulated detector did to one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub id: String,
    pub defects: usize,
    /// Dropped by the small-defect miss rule.
    pub missed: usize,
    /// Detected but erased entirely by erosion.
    pub eroded_away: usize,
    /// Defects with a nonempty predicted footprint.
    pub surviving: usize,
    pub spurious_blobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPredictions {
    pub predictions: Vec<LabeledMask>,
    pub log: Vec<SimulationRecord>,
}

fn erode(component: &[usize], w: usize, h: usize, r: usize) -> Vec<usize> {
    let mut inside = vec![false; w * h];
    for &i in component {
        inside[i] = true;
    }
    component
        .iter()
        .copied()
        .filter(|&i| {
            let (x, y) = (i % w, i / w);
            if x < r || y < r || x + r >= w || y + r >= h {
                return false;
            }
            (y - r..=y + r).all(|ny| (x - r..=x + r).all(|nx| inside[ny * w + nx]))
        })
        .collect()
}

fn dilate(component: &[usize], w: usize, h: usize, r: usize) -> Vec<usize> {
    let mut out = vec![false; w * h];
    for &i in component {
        let (x, y) = (i % w, i / w);
        for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                out[ny * w + nx] = true;
            }
        }
    }
    out.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

fn simulate_one(
    gt: &LabeledMask,
    profile: &DetectorProfile,
    seed: u64,
    index: usize,
    fp_dist: Option<&Poisson<f64>>,
) -> (LabeledMask, SimulationRecord) {
    let mut rng = stream_rng(seed, PREDICTION_STREAM_BASE + index as u64);
    let (w, h) = gt.mask.shape();
    let mut pixels = vec![false; w * h];
    let mut record = SimulationRecord {
        id: gt.id.clone(),
        defects: 0,
        missed: 0,
        eroded_away: 0,
        surviving: 0,
        spurious_blobs: 0,
    };
    for component in gt.mask.components() {
        record.defects += 1;
        let small = (component.len() as u64) < profile.detect_floor_area;
        if small && rng.random_bool(profile.miss_prob_small) {
            record.missed += 1;
            continue;
        }
        let footprint = match profile.boundary_jitter {
            0 => component,
            r if rng.random_bool(0.5) => erode(&component, w, h, r),
            r => dilate(&component, w, h, r),
        };
        if footprint.is_empty() {
            record.eroded_away += 1;
            continue;
        }
        record.surviving += 1;
        for i in footprint {
            pixels[i] = true;
        }
    }
    if let Some(dist) = fp_dist {
        let blobs = dist.sample(&mut rng) as usize;
        record.spurious_blobs = blobs;
        for _ in 0..blobs {
            let bw = rng.random_range(1..=MAX_BLOB_SIDE.min(w));
            let bh = rng.random_range(1..=MAX_BLOB_SIDE.min(h));
            let ox = rng.random_range(0..=w - bw);
            let oy = rng.random_range(0..=h - bh);
            for y in oy..oy + bh {
                for x in ox..ox + bw {
                    pixels[y * w + x] = true;
                }
            }
        }
    }
    let mask = BinaryMask::new(w, h, pixels).expect("shape taken from ground truth");
    (LabeledMask::new(gt.id.clone(), mask), record)
}

/// Runs the simulated detector over a ground-truth set. Defects are the
/// 8-connected components of each mask. The inputs are only read.
pub fn simulate_predictions(
    gt_set: &[LabeledMask],
    profile: &DetectorProfile,
    seed: u64,
) -> Result<SimulatedPredictions, SynthError> {
    profile.validate()?;
    let fp_dist = if profile.false_positive_rate > 0.0 {
        Some(
            Poisson::new(profile.false_positive_rate)
                .map_err(|e| SynthError::InvalidProfile(e.to_string()))?,
        )
    } else {
        None
    };
    let (predictions, log) = gt_set
        .par_iter()
        .enumerate()
        .map(|(i, gt)| simulate_one(gt, profile, seed, i, fp_dist.as_ref()))
        .unzip();
    Ok(SimulatedPredictions { predictions, log })
}

/// Two-sample pixel-dilution dataset: a 1000-pixel defect segmented
/// perfectly and a 50-pixel defect missed entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct DilutionScenario {
    pub gt: Vec<LabeledMask>,
    pub pred: Vec<LabeledMask>,
}

pub fn dilution_scenario() -> DilutionScenario {
    let side = 64;
    let rect = |x0: usize, y0: usize, w: usize, h: usize| {
        BinaryMask::from_fn(side, side, |x, y| {
            (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y)
        })
        .expect("fixed dimensions")
    };
    let large = rect(10, 10, 40, 25);
    let small = rect(20, 40, 10, 5);
    let empty = BinaryMask::empty(side, side).expect("fixed dimensions");
    DilutionScenario {
        gt: vec![
            LabeledMask::new("sample_a", large.clone()),
            LabeledMask::new("sample_b", small),
        ],
        pred: vec![
            LabeledMask::new("sample_a", large),
            LabeledMask::new("sample_b", empty),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            width: 64,
            height: 48,
            num_samples: 40,
            defect_probability: 0.5,
            defects_per_positive: [1, 4],
            scale_alpha: 1.5,
            area_range: [1, 200],
            seed: 11,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.area_range = [10, 5];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.area_range = [1, 64 * 48 + 1];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.defects_per_positive = [0, 2];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.defect_probability = 1.5;
        assert!(c.validate().is_err());
        assert!(DetectorProfile {
            miss_prob_small: 2.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_probability_yields_empty_masks() {
        let mut c = cfg();
        c.defect_probability = 0.0;
        assert!(gen_dataset(&c).unwrap().iter().all(|s| !s.mask.any()));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(gen_dataset(&cfg()).unwrap(), gen_dataset(&cfg()).unwrap());
        let mut other = cfg();
        other.seed = 12;
        assert_ne!(gen_dataset(&cfg()).unwrap(), gen_dataset(&other).unwrap());
    }

    #[test]
    fn defects_have_exact_sampled_areas() {
        let mut c = cfg();
        c.defect_probability = 1.0;
        c.defects_per_positive = [1, 1];
        c.area_range = [37, 37];
        for s in gen_dataset(&c).unwrap() {
            let comps = s.mask.components();
            assert_eq!(comps.len(), 1);
            assert_eq!(comps[0].len(), 37);
        }
    }

    #[test]
    fn defects_stay_separate() {
        let mut c = cfg();
        c.defect_probability = 1.0;
        c.defects_per_positive = [3, 3];
        c.area_range = [5, 60];
        for s in gen_dataset(&c).unwrap() {
            assert_eq!(s.mask.components().len(), 3);
        }
    }

    #[test]
    fn full_image_defect_fits() {
        let c = SynthConfig {
            width: 7,
            height: 5,
            num_samples: 3,
            defect_probability: 1.0,
            defects_per_positive: [1, 1],
            scale_alpha: 1.0,
            area_range: [35, 35],
            seed: 0,
        };
        assert!(gen_dataset(&c).unwrap().iter().all(|s| s.mask.count() == 35));
    }

    #[test]
    fn crowded_images_fail_with_sample_name() {
        let c = SynthConfig {
            width: 4,
            height: 4,
            num_samples: 2,
            defect_probability: 1.0,
            defects_per_positive: [3, 3],
            scale_alpha: 1.0,
            area_range: [9, 9],
            seed: 0,
        };
        match gen_dataset(&c) {
            Err(SynthError::Placement { sample, .. }) => assert!(sample.starts_with("sample_")),
            other => panic!("expected placement error, got {other:?}"),
        }
    }

    #[test]
    fn power_law_support_and_cdf() {
        let p = PowerLawAreas::new(2.0, 4, 10).unwrap();
        assert_eq!(p.cdf(3), 0.0);
        assert_eq!(p.cdf(10), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = p.sample(&mut rng);
            assert!((4..=10).contains(&a));
        }
        assert!(PowerLawAreas::new(0.0, 1, 3).is_err());
    }

    #[test]
    fn perfect_detector_copies_ground_truth() {
        let gt = gen_dataset(&cfg()).unwrap();
        let sim = simulate_predictions(&gt, &DetectorProfile::default(), 3).unwrap();
        for (g, p) in gt.iter().zip(&sim.predictions) {
            assert_eq!(g, p);
        }
    }

    #[test]
    fn total_miss_empties_predictions() {
        let gt = gen_dataset(&cfg()).unwrap();
        let profile = DetectorProfile {
            detect_floor_area: 201,
            miss_prob_small: 1.0,
            ..Default::default()
        };
        let sim = simulate_predictions(&gt, &profile, 3).unwrap();
        assert!(sim.predictions.iter().all(|p| !p.mask.any()));
        assert!(sim.log.iter().all(|r| r.missed == r.defects));
    }

    #[test]
    fn jitter_erodes_and_dilates() {
        let comp: Vec<usize> = (0..5).flat_map(|y| (0..5).map(move |x| (y + 2) * 10 + x + 2)).collect();
        assert_eq!(erode(&comp, 10, 10, 1).len(), 9);
        assert_eq!(dilate(&comp, 10, 10, 1).len(), 49);
        assert!(erode(&comp, 10, 10, 3).is_empty());
    }

    #[test]
    fn spurious_blobs_are_logged() {
        let mut c = cfg();
        c.defect_probability = 0.0;
        let gt = gen_dataset(&c).unwrap();
        let profile = DetectorProfile {
            false_positive_rate: 2.0,
            ..Default::default()
        };
        let sim = simulate_predictions(&gt, &profile, 9).unwrap();
        let blobs: usize = sim.log.iter().map(|r| r.spurious_blobs).sum();
        assert!(blobs > 0);
        for (p, r) in sim.predictions.iter().zip(&sim.log) {
            assert_eq!(p.mask.any(), r.spurious_blobs > 0);
        }
        assert_eq!(sim, simulate_predictions(&gt, &profile, 9).unwrap());
    }

    #[test]
    fn dilution_scenario_counts() {
        let s = dilution_scenario();
        assert_eq!(s.gt[0].mask.count(), 1000);
        assert_eq!(s.gt[1].mask.count(), 50);
        assert_eq!(s.pred[0], s.gt[0]);
        assert!(!s.pred[1].mask.any());
    }
}

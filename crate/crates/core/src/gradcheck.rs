//! Randomized comparison of the analytic loss gradients against central
//! finite differences of the loss functions themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{
    cls_bce, cls_bce_grad, joint_grads, joint_loss, seg_bce, seg_bce_grad, LossError,
    LossWeights,
};
use crate::mask::{BinaryMask, ProbabilityMap};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub trials: usize,
    /// Clamp epsilon handed to the loss functions.
    pub eps: f64,
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance for per-pixel and joint gradients.
    pub seg_tolerance: f64,
    /// Relative tolerance for the sample-level gradient.
    pub cls_tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            eps: crate::loss::DEFAULT_EPS,
            step: 1e-6,
            seg_tolerance: 1e-5,
            cls_tolerance: 1e-7,
            seed: 0x5eed,
        }
    }
}

/// Worst relative error and failure count for one family of checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckStats {
    pub checks: u64,
    pub failures: u64,
    pub max_rel_error: f64,
}

impl CheckStats {
    fn observe(&mut self, analytic: f64, numeric: f64, tolerance: f64) {
        let scale = numeric.abs().max(analytic.abs());
        let rel = if scale == 0.0 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        self.checks += 1;
        self.max_rel_error = self.max_rel_error.max(rel);
        if !(rel < tolerance) {
            self.failures += 1;
        }
    }

    fn flag(&mut self, ok: bool) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub seg: CheckStats,
    pub cls: CheckStats,
    pub joint: CheckStats,
    /// Exact scaling of the joint loss and gradients by powers of two.
    pub linearity: CheckStats,
    /// Map gradient blind to the sample branch and vice versa.
    pub routing: CheckStats,
    /// Clamped pixels must carry exactly zero gradient.
    pub clamped: CheckStats,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        [
            &self.seg,
            &self.cls,
            &self.joint,
            &self.linearity,
            &self.routing,
            &self.clamped,
        ]
        .iter()
        .all(|s| s.failures == 0)
    }
}

const CHECK_LO: f64 = 0.01;
const CHECK_HI: f64 = 0.99;

struct Instance {
    s: ProbabilityMap,
    y_mask: BinaryMask,
    p_hat: f64,
    y: bool,
    weights: LossWeights,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let w = rng.random_range(1..=8);
    let h = rng.random_range(1..=8);
    let values = (0..w * h)
        .map(|_| match rng.random_range(0..20) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(CHECK_LO..=CHECK_HI),
        })
        .collect();
    let density: f64 = rng.random();
    let y_mask = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density)).unwrap();
    let lambda_seg = if rng.random_bool(0.1) {
        0.0
    } else {
        rng.random_range(0.1..2.0)
    };
    let weights = LossWeights::new(lambda_seg, rng.random_range(0.1..1.0)).expect("positive sum");
    Instance {
        s: ProbabilityMap::new(w, h, values).unwrap(),
        y_mask,
        p_hat: rng.random_range(CHECK_LO..=CHECK_HI),
        y: rng.random_bool(0.5),
        weights,
    }
}

fn central<F: Fn(f64) -> Result<f64, LossError>>(f: F, x: f64, h: f64) -> Result<f64, LossError> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        trials: cfg.trials,
        ..Default::default()
    };
    let (eps, h) = (cfg.eps, cfg.step);
    for _ in 0..cfg.trials {
        let inst = random_instance(&mut rng);
        let Instance {
            s,
            y_mask,
            p_hat,
            y,
            weights,
        } = &inst;

        let grad = seg_bce_grad(s, y_mask, eps)?;
        let (ds, dp) = joint_grads(s, y_mask, *p_hat, *y, weights, eps)?;
        for (i, &v) in s.values().iter().enumerate() {
            if v < eps || v > 1.0 - eps {
                report.clamped.flag(grad.values()[i] == 0.0 && ds.values()[i] == 0.0);
                continue;
            }
            if !(CHECK_LO..=CHECK_HI).contains(&v) {
                continue;
            }
            let fd = central(|x| seg_bce(&s.with_value(i, x).unwrap(), y_mask, eps), v, h)?;
            report.seg.observe(grad.values()[i], fd, cfg.seg_tolerance);
            let fd_joint = central(
                |x| Ok(joint_loss(&s.with_value(i, x).unwrap(), y_mask, *p_hat, *y, weights, eps)?.total),
                v,
                h,
            )?;
            if weights.lambda_seg() > 0.0 {
                report.joint.observe(ds.values()[i], fd_joint, cfg.seg_tolerance);
            } else {
                report.joint.flag(ds.values()[i] == 0.0 && fd_joint == 0.0);
            }
        }

        let fd = central(|x| cls_bce(x, *y, eps), *p_hat, h)?;
        report
            .cls
            .observe(cls_bce_grad(*p_hat, *y, eps)?, fd, cfg.cls_tolerance);
        let fd_joint = central(
            |x| Ok(joint_loss(s, y_mask, x, *y, weights, eps)?.total),
            *p_hat,
            h,
        )?;
        report.joint.observe(dp, fd_joint, cfg.seg_tolerance);

        let base = joint_loss(s, y_mask, *p_hat, *y, weights, eps)?;
        for factor in [0.5, 2.0, 4.0] {
            let scaled_w = weights.scaled(factor)?;
            let scaled = joint_loss(s, y_mask, *p_hat, *y, &scaled_w, eps)?;
            report.linearity.flag(
                scaled.total == factor * base.total
                    && scaled.seg == base.seg
                    && scaled.cls == base.cls,
            );
            let (ds2, dp2) = joint_grads(s, y_mask, *p_hat, *y, &scaled_w, eps)?;
            report.linearity.flag(
                dp2 == factor * dp
                    && ds2
                        .values()
                        .iter()
                        .zip(ds.values())
                        .all(|(a, b)| *a == factor * b),
            );
        }

        // Perturb one branch's inputs and confirm the other gradient is untouched.
        let other_p = 1.0 - p_hat;
        let other_w = LossWeights::new(weights.lambda_seg(), weights.lambda_cls() + 1.0)?;
        let (ds_alt, _) = joint_grads(s, y_mask, other_p, !*y, &other_w, eps)?;
        report.routing.flag(ds_alt == ds);
        let flipped = ProbabilityMap::new(
            s.width(),
            s.height(),
            s.values().iter().map(|v| 1.0 - v).collect(),
        )
        .unwrap();
        let inverted = BinaryMask::new(
            y_mask.width(),
            y_mask.height(),
            y_mask.pixels().iter().map(|b| !b).collect(),
        )
        .unwrap();
        let (_, dp_alt) = joint_grads(&flipped, &inverted, *p_hat, *y, weights, eps)?;
        report.routing.flag(dp_alt == dp);
    }
    Ok(report)
}

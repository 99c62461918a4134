use defect_eval::synth::{sample_id, SynthError};
use defect_eval::{
    evaluate_masks, gen_dataset, simulate_predictions, DecisionRule, DetectorProfile, Prediction,
    SynthConfig,
};

fn cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        width: 96,
        height: 80,
        num_samples: 300,
        defect_probability: 0.35,
        defects_per_positive: [1, 4],
        scale_alpha: 1.6,
        area_range: [1, 400],
        seed,
    }
}

#[test]
fn simulated_recall_counts_surviving_defects() {
    let gt = gen_dataset(&cfg(5)).unwrap();
    let profile = DetectorProfile {
        detect_floor_area: 30,
        miss_prob_small: 0.7,
        boundary_jitter: 1,
        false_positive_rate: 0.0,
    };
    let sim = simulate_predictions(&gt, &profile, 99).unwrap();
    let preds: Vec<(String, Prediction)> = sim
        .predictions
        .iter()
        .map(|p| (p.id.clone(), Prediction::Mask(p.mask.clone())))
        .collect();
    let report = evaluate_masks(&gt, &preds, &DecisionRule::default(), None).unwrap();

    let positives = sim.log.iter().filter(|r| r.defects > 0).count();
    let found = sim.log.iter().filter(|r| r.defects > 0 && r.surviving > 0).count();
    assert!(positives > 50 && found < positives);
    assert_eq!(report.summary.seg_recall, Some(found as f64 / positives as f64));
    for r in &sim.log {
        assert_eq!(r.defects, r.missed + r.eroded_away + r.surviving, "{r:?}");
        assert_eq!(r.spurious_blobs, 0);
    }
}

#[test]
fn labels_follow_masks() {
    let gt = gen_dataset(&cfg(17)).unwrap();
    let [dmin, dmax] = cfg(17).defects_per_positive;
    for (i, s) in gt.iter().enumerate() {
        assert_eq!(s.id, sample_id(i));
        let n = s.mask.components().len();
        assert!(n == 0 || (dmin..=dmax).contains(&n), "{}: {n} components", s.id);
        for c in s.mask.components() {
            assert!((1..=400).contains(&c.len()));
        }
    }
    let positives = gt.iter().filter(|s| s.mask.any()).count() as f64;
    // 300 Bernoulli(0.35) draws: six standard deviations is about 50.
    assert!((positives - 105.0).abs() < 50.0, "{positives} positives");
}

#[test]
fn generation_is_deterministic_and_inputs_untouched() {
    let a = gen_dataset(&cfg(3)).unwrap();
    let b = gen_dataset(&cfg(3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_dataset(&cfg(4)).unwrap());

    let profile = DetectorProfile {
        detect_floor_area: 10,
        miss_prob_small: 0.3,
        boundary_jitter: 2,
        false_positive_rate: 0.5,
    };
    let snapshot = a.clone();
    let s1 = simulate_predictions(&a, &profile, 1).unwrap();
    let s2 = simulate_predictions(&a, &profile, 1).unwrap();
    assert_eq!(a, snapshot);
    assert_eq!(s1, s2);
    assert!(s1.log.iter().any(|r| r.spurious_blobs > 0));
}

#[test]
fn perfect_detector_reproduces_ground_truth() {
    let gt = gen_dataset(&cfg(8)).unwrap();
    let sim = simulate_predictions(&gt, &DetectorProfile::default(), 0).unwrap();
    assert_eq!(sim.predictions, gt);
}

#[test]
fn crowded_image_reports_the_sample() {
    let crowded = SynthConfig {
        width: 6,
        height: 6,
        num_samples: 4,
        defect_probability: 1.0,
        defects_per_positive: [5, 5],
        scale_alpha: 1.0,
        area_range: [9, 9],
        seed: 0,
    };
    match gen_dataset(&crowded) {
        Err(SynthError::Placement { sample, .. }) => assert!(sample.starts_with("sample_")),
        other => panic!("expected a placement error, got {other:?}"),
    }
}

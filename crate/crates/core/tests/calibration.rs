mod common;

use pimnb::calibration::{
    calibrate, calibration_step, eval_with_dynamic_calibration, CalibratedStats, CalibrationConfig, CalibrationError,
    DynamicScoring,
};
use pimnb::data::Split;
use pimnb::eval::{evaluate, EVAL_BATCH_BASE};
use pimnb::nn::LayerParams;
use pimnb::{instantiate_device, LayerSpec, Model, NoiseKind, NoiseSpec};
use proptest::prelude::*;

fn one_bn() -> Model {
    Model::init(vec![LayerSpec::BatchNorm2d { channels: 1, epsilon: 1e-5 }], 0).unwrap()
}

#[test]
fn geometric_contraction_is_exact() {
    let m = 0.999;
    let (mu0, mu_star, var_star) = (2.0, -0.75, 3.0);
    let mut s = calibration_step(&CalibratedStats::new(&one_bn()), 0, &[mu0], &[0.5], m).unwrap();
    // The recurrence e_{k+1} = m * e_k, evaluated with the same rounding as the update.
    let mut expected = mu0;
    for k in 1..=2000 {
        s = calibration_step(&s, 0, &[mu_star], &[var_star], m).unwrap();
        expected = m * expected + (1.0 - m) * mu_star;
        assert_eq!(s.layer(0).unwrap().mean[0], expected, "step {k}");
        if k % 250 == 0 {
            let closed = m.powi(k) * (mu0 - mu_star).abs();
            let got = (s.layer(0).unwrap().mean[0] - mu_star).abs();
            assert!((got - closed).abs() <= 1e-12, "k={k}: {got} vs {closed}");
        }
    }
}

#[test]
fn fixed_point_holds_exactly() {
    let mut s = CalibratedStats::new(&one_bn());
    for _ in 0..500 {
        s.step(0, &[0.3125], &[1.5], 0.999).unwrap();
    }
    let l = s.layer(0).unwrap();
    assert_eq!((l.mean[0], l.var[0]), (0.3125, 1.5));
}

proptest! {
    #[test]
    fn calibrated_mean_stays_in_hull(means in prop::collection::vec(-5.0f64..5.0, 1..200), m in 0.5f64..0.9999) {
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = CalibratedStats::new(&one_bn());
        for &mu in &means {
            s.step(0, &[mu], &[1.0], m).unwrap();
            let c = s.layer(0).unwrap().mean[0];
            prop_assert!(c >= lo && c <= hi, "{c} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn calibration_rejects_bad_inputs() {
    let (train, _, test) = common::reference_data(3);
    let mut model = Model::reference_cnn(1, common::CLASSES, 3).unwrap();
    let device = instantiate_device(&model, &NoiseSpec::new(NoiseKind::Mul, 0.1, 1)).unwrap();
    let cfg = CalibrationConfig::default();
    assert!(matches!(calibrate(&mut model, &device, &test, &cfg), Err(CalibrationError::TestSplit)));
    let allowed = CalibrationConfig { allow_test_split: true, ..cfg.clone() };
    assert!(calibrate(&mut model, &device, &test.take(64).unwrap(), &allowed).is_ok());
    let empty = train.take(1).unwrap();
    assert!(matches!(calibrate(&mut model, &device, &empty, &cfg), Err(CalibrationError::EmptyData)));
    let tiny = CalibrationConfig { batch_size: 1, ..cfg };
    assert!(matches!(calibrate(&mut model, &device, &train, &tiny), Err(CalibrationError::InsufficientBatch(1))));
    assert_eq!(test.split(), Split::Test);
}

#[test]
fn calibration_touches_only_batchnorm_statistics() {
    let (train, _, _) = common::reference_data(4);
    let model = Model::reference_cnn(1, common::CLASSES, 4).unwrap();
    let device = instantiate_device(&model, &NoiseSpec::new(NoiseKind::Mul, 0.1, 2)).unwrap();
    let mut calibrated = model.clone();
    let stats = calibrate(&mut calibrated, &device, &train.take(256).unwrap(), &CalibrationConfig::default()).unwrap();
    assert_eq!(stats.batches_seen(), 8);
    let mut changed = false;
    for (a, b) in model.params().iter().zip(calibrated.params()) {
        match (a, b) {
            (LayerParams::BatchNorm(x), LayerParams::BatchNorm(y)) => {
                assert_eq!(x.gamma, y.gamma);
                assert_eq!(x.beta, y.beta);
                assert_eq!(x.epsilon, y.epsilon);
                changed |= x.running_mean != y.running_mean;
            }
            _ => assert_eq!(a, b),
        }
    }
    assert!(changed);
    for l in model.bn_layers() {
        let s = stats.layer(l).unwrap();
        let bn = calibrated.bn_stats(l).unwrap();
        assert!(s.var.iter().all(|&v| v >= 0.0));
        assert_eq!(bn.running_mean, s.mean.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }
}

#[test]
fn dynamic_calibration_on_a_trained_model() {
    let (train, val, test) = common::reference_data(5);
    let model = common::trained_reference(5, &train, &val);
    let clean = evaluate(&model, None, &test, 32, EVAL_BATCH_BASE).unwrap();

    // Disabled: identical to plain Eval on the frozen statistics.
    let device = instantiate_device(&model, &NoiseSpec::new(NoiseKind::Mul, 0.08, 11)).unwrap();
    let frozen = CalibrationConfig::default();
    let mut m = model.clone();
    let (metrics, _) = eval_with_dynamic_calibration(&mut m, &device, &test, &frozen, EVAL_BATCH_BASE).unwrap();
    assert_eq!(metrics, evaluate(&model, Some(&device), &test, frozen.batch_size, EVAL_BATCH_BASE).unwrap());
    assert_eq!(m, model);

    // eta0 = 0: the statistics stay close to the training ones.
    let quiet = instantiate_device(&model, &NoiseSpec::new(NoiseKind::Mul, 0.0, 11)).unwrap();
    let dynamic = CalibrationConfig { dynamic: true, ..Default::default() };
    let mut m = model.clone();
    let (metrics, _) = eval_with_dynamic_calibration(&mut m, &quiet, &test, &dynamic, EVAL_BATCH_BASE).unwrap();
    assert!((metrics.accuracy - clean.accuracy).abs() <= 0.5, "{} vs {}", metrics.accuracy, clean.accuracy);

    // Noise scale switched from 0.02 to 0.10 mid-stream.
    let stream = pimnb::data::synthetic_blobs(&pimnb::data::SyntheticConfig::new(1000, common::CLASSES, common::IMAGE_SIZE, 77))
        .unwrap()
        .with_split(Split::Test);
    let before = stream.subset(&(0..1000).collect::<Vec<_>>()).unwrap();
    let after = stream.subset(&(1000..3000).collect::<Vec<_>>()).unwrap();
    let later = stream.subset(&(2000..3000).collect::<Vec<_>>()).unwrap();
    let low = instantiate_device(&model, &NoiseSpec::new(NoiseKind::Mul, 0.02, 21)).unwrap();
    let high = instantiate_device(&model, &NoiseSpec::new(NoiseKind::Mul, 0.10, 21)).unwrap();
    let mut reference = model.clone();
    calibrate(&mut reference, &high, &train, &CalibrationConfig::default()).unwrap();
    let target = evaluate(&reference, Some(&high), &later, 32, EVAL_BATCH_BASE + 500).unwrap();

    let cfg = CalibrationConfig { dynamic: true, dynamic_scoring: DynamicScoring::BatchStats, ..Default::default() };
    let mut m = model.clone();
    calibrate(&mut m, &low, &train, &CalibrationConfig::default()).unwrap();
    eval_with_dynamic_calibration(&mut m, &low, &before, &cfg, EVAL_BATCH_BASE).unwrap();
    // First 1000 post-switch samples adapt; the next 1000 are scored.
    eval_with_dynamic_calibration(&mut m, &high, &after.take(1000).unwrap(), &cfg, EVAL_BATCH_BASE + 100).unwrap();
    let (tracked, _) = eval_with_dynamic_calibration(&mut m, &high, &later, &cfg, EVAL_BATCH_BASE + 500).unwrap();
    assert!(
        tracked.accuracy >= target.accuracy - 2.0,
        "after switch {} vs statically calibrated {}",
        tracked.accuracy,
        target.accuracy
    );
}

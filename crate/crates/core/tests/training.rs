mod common;

use pimnb::data::{synthetic_blobs, BatchOrder, SyntheticConfig};
use pimnb::eval::{evaluate, EVAL_BATCH_BASE};
use pimnb::nn::{ExecMode, LayerParams};
use pimnb::train::{noise_injection_finetune, record_forward, train, Schedule, TrainConfig, TrainError};
use pimnb::{instantiate_device, Model, NoiseKind, NoiseSpec};

/// Trainable parameters only (running statistics excluded).
fn trainable(model: &Model) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    for p in model.params() {
        match p {
            LayerParams::Affine { weight, bias } => {
                out.push(weight.data().to_vec());
                if let Some(b) = bias {
                    out.push(b.data().to_vec());
                }
            }
            LayerParams::BatchNorm(s) => {
                out.push(s.gamma.clone());
                out.push(s.beta.clone());
            }
            LayerParams::None => {}
        }
    }
    out
}

fn same_bits(a: &[Vec<f32>], b: &[Vec<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn reference_config_reaches_95_percent() {
    let (train_data, val, test) = common::reference_data(1);
    let mut model = Model::reference_cnn(1, common::CLASSES, 1).unwrap();
    let report = train(&mut model, &train_data, &val, &TrainConfig { seed: 1, ..Default::default() }).unwrap();
    assert!(report.best_val_acc >= 95.0, "{}", report.csv());
    let final_lr = report.epochs.last().unwrap().lr;
    assert!(final_lr.abs() < 1e-12);
    assert!(evaluate(&model, None, &test, 100, EVAL_BATCH_BASE).unwrap().accuracy >= 95.0);
}

#[test]
fn overfits_a_small_set() {
    let data = synthetic_blobs(&SyntheticConfig::new(171, 3, common::IMAGE_SIZE, 8)).unwrap().take(512).unwrap();
    let mut model = Model::reference_cnn(1, 3, 8).unwrap();
    let cfg = TrainConfig { epochs: 30, seed: 8, ..Default::default() };
    let report = train(&mut model, &data, &data.take(64).unwrap(), &cfg).unwrap();
    let last = report.epochs.last().unwrap();
    assert!(last.train_acc >= 99.0, "{}", report.csv());
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (train_data, val, _) = common::reference_data(2);
    let mut model = Model::reference_cnn(1, common::CLASSES, 2).unwrap();
    let before = trainable(&model);
    let cfg = TrainConfig { epochs: 1, lr: 0.0, ..Default::default() };
    train(&mut model, &train_data.take(256).unwrap(), &val, &cfg).unwrap();
    assert!(same_bits(&before, &trainable(&model)));

    // Noise-injection training with lr = 0: the master weights never see the
    // noisy realization.
    let spec = NoiseSpec::new(NoiseKind::Mul, 0.1, 3);
    noise_injection_finetune(&mut model, &train_data.take(256).unwrap(), &val, &spec, &cfg).unwrap();
    assert!(same_bits(&before, &trainable(&model)));
}

#[test]
fn training_is_deterministic_and_noise_free_nit_matches_plain() {
    let (train_data, val, _) = common::reference_data(3);
    let small = train_data.take(384).unwrap();
    let cfg = TrainConfig { epochs: 2, seed: 3, ..Default::default() };
    let run = |noise: Option<NoiseSpec>| {
        let mut m = Model::reference_cnn(1, common::CLASSES, 3).unwrap();
        let r = match noise {
            Some(spec) => noise_injection_finetune(&mut m, &small, &val, &spec, &cfg).unwrap(),
            None => train(&mut m, &small, &val, &cfg).unwrap(),
        };
        (r.epochs, m)
    };
    let (a, ma) = run(None);
    let (b, mb) = run(None);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    for kind in [NoiseKind::Mul, NoiseKind::Add] {
        let (c, mc) = run(Some(NoiseSpec::new(kind, 0.0, 9)));
        assert_eq!(a, c, "{kind}");
        assert_eq!(ma, mc, "{kind}");
    }
}

#[test]
fn held_out_loss_decreases_early() {
    let (train_data, val, test) = common::reference_data(4);
    let held_out = test.batches(64, BatchOrder::Sequential, 2).next().unwrap();
    let mut model = Model::reference_cnn(1, common::CLASSES, 4).unwrap();
    let loss = |m: &Model| {
        let rec = record_forward(m, None, &held_out.images, ExecMode::Eval).unwrap();
        let n = held_out.labels.len();
        pimnb::nn::ops::softmax_cross_entropy(rec.logits.data(), n, common::CLASSES, &held_out.labels).0
    };
    let mut losses = vec![loss(&model)];
    for epoch in 0..5 {
        let cfg = TrainConfig { epochs: 1, seed: epoch, lr: 0.02, schedule: Schedule::Constant, ..Default::default() };
        train(&mut model, &train_data, &val, &cfg).unwrap();
        losses.push(loss(&model));
    }
    let decreases = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(decreases >= 4, "{losses:?}");
}

#[test]
fn divergence_is_reported_with_position() {
    let (train_data, val, _) = common::reference_data(5);
    let mut model = Model::reference_cnn(1, common::CLASSES, 5).unwrap();
    let cfg = TrainConfig { epochs: 3, lr: 1e12, schedule: Schedule::Constant, ..Default::default() };
    match train(&mut model, &train_data, &val, &cfg) {
        Err(TrainError::Diverged { epoch, batch }) => assert!(epoch < 3 && batch < 44),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn noise_injection_helps_at_its_own_scale() {
    let (train_data, val, test) = common::reference_data(6);
    let model = common::trained_reference(6, &train_data, &val);
    let spec = NoiseSpec::new(NoiseKind::Mul, 0.08, 31);
    let mut nit = model.clone();
    let cfg = TrainConfig { epochs: 2, lr: 0.01, seed: 6, ..Default::default() };
    noise_injection_finetune(&mut nit, &train_data, &val, &spec, &cfg).unwrap();
    let (mut vanilla, mut tuned) = (0.0, 0.0);
    for seed in 0..3 {
        let device = instantiate_device(&model, &spec.with_seed(100 + seed)).unwrap();
        vanilla += evaluate(&model, Some(&device), &test, 32, EVAL_BATCH_BASE).unwrap().accuracy;
        tuned += evaluate(&nit, Some(&device), &test, 32, EVAL_BATCH_BASE).unwrap().accuracy;
    }
    assert!(tuned > vanilla, "nit {} vs vanilla {}", tuned / 3.0, vanilla / 3.0);
}

use ncconv::data::{synth_classification, Dataset, SynthOptions};
use ncconv::network::{
    evaluate, fit, train_epoch, ArchConfig, ArchKind, LayerSpec, Linear, Model, ModelSpec, Sgd, TrainConfig,
};
use ncconv::{ActivationKind, Rng, Tensor};

fn no_aug(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        augmentation: Default::default(),
        ..cfg
    }
}

#[test]
fn one_sgd_step_matches_hand_arithmetic() {
    // y = w x + b, L = (y - t)^2 / 2 with w = 0.5, b = -1, x = 2, t = 1:
    // y = 0, dL/dy = -1, dL/dw = -2, dL/db = -1; lr 0.1 -> w = 0.7, b = -0.9
    let spec = ModelSpec {
        input: [1, 1, 1],
        layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 1 }],
    };
    let mut m = Model::<f64>::build(spec, &mut Rng::new(0)).unwrap();
    if let ncconv::network::Op::Linear(l) = &mut m.nodes_mut()[1].op {
        *l = Linear::with_weights(
            Tensor::from_f64(&[1, 1], &[0.5]).unwrap(),
            Tensor::from_f64(&[1], &[-1.0]).unwrap(),
        );
    }
    let x = Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
    let y = m.forward(&x).unwrap();
    assert_eq!(y.data(), &[0.0]);
    m.backward(&Tensor::from_f64(&[1, 1], &[y.data()[0] - 1.0]).unwrap()).unwrap();
    Sgd::new(0.0, 0.0).step(&mut m, 0.1);
    let p = m.params();
    assert!((p[0].1.data()[0] - 0.7).abs() < 1e-15);
    assert!((p[1].1.data()[0] + 0.9).abs() < 1e-15);
}

fn random_labels(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let ds = synth_classification(n, classes, (3, 8, 8), &mut rng, SynthOptions::default()).unwrap();
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    Dataset::new("random-labels", ds.images, labels, classes).unwrap()
}

#[test]
fn two_layer_nc_model_memorizes_random_labels() {
    let data = random_labels(32, 10, 5);
    let arch = ArchConfig {
        arch: ArchKind::TwoLayer,
        widths: vec![8],
        ..ArchConfig::default()
    };
    let mut m = Model::<f32>::build(arch.to_spec([3, 8, 8]).unwrap(), &mut Rng::new(1)).unwrap();
    let cfg = no_aug(TrainConfig {
        lr: 0.01,
        epochs: 200,
        ..TrainConfig::default()
    });
    let mut sgd = Sgd::from_config(&cfg);
    let mut reached = None;
    for epoch in 0..cfg.epochs {
        train_epoch(&mut m, &mut sgd, &data, &cfg, epoch, true).unwrap();
        if evaluate(&mut m, &data).unwrap().top1 == 1.0 {
            reached = Some(epoch);
            break;
        }
    }
    println!("100% train accuracy after epoch {reached:?}");
    assert!(reached.is_some());
}

#[test]
fn linear_probe_separates_separable_synthetic_classes() {
    let opts = SynthOptions {
        separable: true,
        ..Default::default()
    };
    let data = synth_classification(60, 4, (1, 6, 6), &mut Rng::new(3), opts).unwrap();
    let spec = ModelSpec {
        input: [1, 6, 6],
        layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 4 }],
    };
    let mut m = Model::<f64>::build(spec, &mut Rng::new(4)).unwrap();
    let cfg = no_aug(TrainConfig {
        lr: 0.05,
        epochs: 30,
        ..Default::default()
    });
    fit(&mut m, &data, None, &cfg, 0, true, &mut |_, _| Ok(())).unwrap();
    assert_eq!(evaluate(&mut m, &data).unwrap().top1, 1.0);
}

fn small_resnet(seed: u64) -> Model<f32> {
    let arch = ArchConfig {
        widths: vec![4, 8],
        ..ArchConfig::default()
    };
    Model::build(arch.to_spec([3, 8, 8]).unwrap(), &mut Rng::new(seed)).unwrap()
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = synth_classification(16, 10, (3, 8, 8), &mut Rng::new(1), SynthOptions::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut m = small_resnet(2);
        let recs = fit(&mut m, &data, Some(&data), &cfg, 0, true, &mut |_, _| Ok(())).unwrap();
        (recs, m.params())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.iter().all(|r| r.losses_valid()));
}

#[test]
fn resuming_from_saved_parameters_continues_the_run() {
    let data = synth_classification(12, 10, (3, 8, 8), &mut Rng::new(1), SynthOptions::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 4,
        ..Default::default()
    };
    let mut full = small_resnet(2);
    let all = fit(&mut full, &data, None, &cfg, 0, true, &mut |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("e0.ckpt");
    let mut first = small_resnet(2);
    let first_cfg = TrainConfig { epochs: 1, ..cfg.clone() };
    fit(&mut first, &data, None, &first_cfg, 0, true, &mut |_, m| ncconv::network::save_checkpoint(m, &ckpt)).unwrap();
    let mut resumed = small_resnet(77);
    ncconv::network::load_checkpoint(&mut resumed, &ckpt).unwrap();
    let rest = fit(&mut resumed, &data, None, &cfg, 1, true, &mut |_, _| Ok(())).unwrap();
    assert_eq!(rest, all[1..]);
    assert_eq!(resumed.params(), full.params());
}

#[test]
fn zero_learning_rate_gives_flat_loss() {
    let data = synth_classification(8, 10, (3, 8, 8), &mut Rng::new(1), SynthOptions::default()).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 3,
        ..Default::default()
    };
    let mut m = small_resnet(3);
    let before = m.params();
    let recs = fit(&mut m, &data, Some(&data), &cfg, 0, true, &mut |_, _| Ok(())).unwrap();
    assert_eq!(m.params(), before);
    assert!(recs.windows(2).all(|w| w[0].val_loss == w[1].val_loss));
}

#[test]
fn selu_and_elu_models_train() {
    let data = synth_classification(8, 10, (3, 8, 8), &mut Rng::new(1), SynthOptions::default()).unwrap();
    for activation in [ActivationKind::Elu, ActivationKind::Selu] {
        let arch = ArchConfig {
            activation,
            widths: vec![4, 8],
            ..ArchConfig::default()
        };
        let mut m = Model::<f32>::build(arch.to_spec([3, 8, 8]).unwrap(), &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let recs = fit(&mut m, &data, Some(&data), &cfg, 0, true, &mut |_, _| Ok(())).unwrap();
        assert!(recs[0].losses_valid());
    }
}

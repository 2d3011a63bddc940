use hsi_autodiff::{ParamStore, Tensor};
use hsi_core::cassi::{shift_back, simulate, CodedMask, DispersionSpec, SpectralCube};
use hsi_core::metrics::{psnr, psnr_from_mse, ssim};
use hsi_core::net::layers::randomize;
use hsi_core::net::{Network, NetworkConfig};
use hsi_core::scene::{generate_scene, SceneSpec};
use hsi_core::train::{charbonnier_loss, cosine_lr, evaluate_loss, train, write_outputs, Adam, Sample, TrainConfig};
use hsi_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", Tensor::scalar(value));
    s
}

#[test]
fn adam_matches_hand_computed_trace() {
    // m, v and the bias-corrected update evaluated by hand for
    // beta1 = 0.9, beta2 = 0.999, eps = 1e-8, lr = 0.1
    let expected = [0.900000002, 0.8654394181165108, 0.8275002408356956];
    let mut store = single(1.0);
    let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
    for (g, want) in [0.5, -0.2, 0.1].into_iter().zip(expected) {
        adam.step(&mut store, &[Tensor::scalar(g)], 0.1).unwrap();
        assert!((store.tensors().next().unwrap().item() - want).abs() < 1e-12);
    }
    assert_eq!(adam.steps_taken(), 3);
}

#[test]
fn adam_constant_gradient_moves_by_lr() {
    let mut store = single(0.0);
    let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
    let mut prev = 0.0;
    for _ in 0..2000 {
        adam.step(&mut store, &[Tensor::scalar(-3.0)], 1e-3).unwrap();
        let now = store.tensors().next().unwrap().item();
        assert!(((now - prev) - 1e-3).abs() < 1e-9);
        prev = now;
    }
}

#[test]
fn adam_zero_gradient_and_zero_rate_leave_parameters() {
    let mut net = Network::new(NetworkConfig {
        stages: 1,
        channels: 4,
        base_channels: 4,
        ..NetworkConfig::default()
    })
    .unwrap();
    randomize(net.params_mut(), 0.3, &mut ChaCha8Rng::seed_from_u64(2));
    let before: Vec<Tensor> = net.params().tensors().cloned().collect();
    let mut adam = Adam::new(net.params(), 0.9, 0.999, 1e-8);
    let zeros: Vec<Tensor> = before.iter().map(|t| Tensor::zeros(t.shape())).collect();
    adam.step(net.params_mut(), &zeros, 0.1).unwrap();
    assert!(net.params().tensors().zip(&before).all(|(a, b)| a == b));
    let grads: Vec<Tensor> = before
        .iter()
        .enumerate()
        .map(|(i, t)| Tensor::uniform(t.shape(), -1.0, 1.0, i as u64))
        .collect();
    adam.step(net.params_mut(), &grads, 0.0).unwrap();
    assert!(net.params().tensors().zip(&before).all(|(a, b)| a.data() == b.data()));
}

#[test]
fn cosine_schedule_starts_at_initial_rate() {
    let cfg = TrainConfig::default();
    assert_eq!(cosine_lr(0, &cfg), 3e-4);
    assert_eq!(cosine_lr(cfg.total_steps, &cfg), cfg.lr_min);
    let mid = cosine_lr(cfg.total_steps / 2, &cfg);
    assert!((mid - (cfg.lr_initial + cfg.lr_min) / 2.0).abs() < 1e-18);
    assert!((1..=cfg.total_steps).all(|s| cosine_lr(s, &cfg) <= cosine_lr(s - 1, &cfg)));
}

fn toy() -> (NetworkConfig, Vec<SpectralCube>, CodedMask, DispersionSpec) {
    let cfg = NetworkConfig {
        stages: 2,
        channels: 4,
        base_channels: 4,
        seed: 3,
        ..NetworkConfig::default()
    };
    let scenes = (0..3)
        .map(|s| generate_scene(&SceneSpec::new(16, 16, 4, s)).unwrap())
        .collect();
    (cfg, scenes, CodedMask::random_binary(16, 16, 9), DispersionSpec::new(1))
}

#[test]
fn training_is_deterministic_and_logs_initial_loss() {
    let (net_cfg, scenes, mask, spec) = toy();
    let cfg = TrainConfig {
        total_steps: 4,
        batch_size: 3,
        eval_interval: 2,
        noise_sigma: 0.01,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = Network::new(net_cfg.clone()).unwrap();
    let samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .map(|(i, c)| Sample::new(c.clone(), &mask, &spec, cfg.noise_sigma, cfg.seed + i as u64).unwrap())
        .collect();
    let initial = evaluate_loss(&fresh, &samples, cfg.charbonnier_eps).unwrap();

    let mut a = Network::new(net_cfg.clone()).unwrap();
    let ra = train(&mut a, &cfg, &scenes, &mask, &spec, &scenes[..1]).unwrap();
    let mut b = Network::new(net_cfg).unwrap();
    let rb = train(&mut b, &cfg, &scenes, &mask, &spec, &scenes[..1]).unwrap();
    assert_eq!(ra.trace, rb.trace);
    assert!(a.params().tensors().zip(b.params().tensors()).all(|(x, y)| x == y));
    assert!((ra.trace[0].loss - initial).abs() < 1e-15);
    assert_eq!(ra.trace.iter().filter(|r| r.psnr.is_some()).count(), 2);
    assert!(ra.trace.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let (net_cfg, scenes, mask, spec) = toy();
    let mut net = Network::new(net_cfg).unwrap();
    net.params_mut().tensors_mut().next().unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        total_steps: 3,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut net, &cfg, &scenes, &mask, &spec, &[]),
        Err(Error::NonFiniteLoss { step: 0 })
    ));
}

#[test]
fn invalid_train_configs() {
    let (net_cfg, scenes, mask, spec) = toy();
    let mut net = Network::new(net_cfg).unwrap();
    for cfg in [
        TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            charbonnier_eps: 0.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            train(&mut net, &cfg, &scenes, &mask, &spec, &[]),
            Err(Error::Invalid(_))
        ));
    }
    assert!(train(&mut net, &TrainConfig::default(), &[], &mask, &spec, &[]).is_err());
}

#[test]
fn outputs_are_written() {
    let (net_cfg, scenes, mask, spec) = toy();
    let mut net = Network::new(net_cfg.clone()).unwrap();
    let cfg = TrainConfig {
        total_steps: 2,
        ..TrainConfig::default()
    };
    let report = train(&mut net, &cfg, &scenes[..1], &mask, &spec, &scenes[..1]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &net, &report).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,loss,lr,psnr,ssim");
    assert_eq!(csv.lines().count(), 3);
    let bytes = std::fs::read(dir.path().join("checkpoint.aspw")).unwrap();
    let loaded = Network::load(net_cfg, bytes.as_slice()).unwrap();
    assert!(loaded
        .params()
        .tensors()
        .zip(net.params().tensors())
        .all(|(a, b)| a == b));
}

#[test]
fn shift_back_baseline_is_measurable() {
    let cube = generate_scene(&SceneSpec::new(16, 16, 4, 1)).unwrap();
    let mask = CodedMask::random_binary(16, 16, 1);
    let spec = DispersionSpec::new(1);
    let y = simulate(&cube, &mask, &spec, 0.0, 0).unwrap();
    let p = psnr(&shift_back(&y, &spec, 4, 16).unwrap(), &cube, 1.0).unwrap();
    assert!(p.is_finite());
}

#[test]
fn ssim_is_translation_invariant_with_matching_crop() {
    let a = generate_scene(&SceneSpec::new(24, 24, 2, 4)).unwrap();
    let b = generate_scene(&SceneSpec::new(24, 24, 2, 5)).unwrap();
    let crop = |c: &SpectralCube, oy: usize, ox: usize| {
        let mut data = Vec::new();
        for y in oy..oy + 16 {
            for x in ox..ox + 16 {
                for n in 0..2 {
                    data.push(c.get(y, x, n));
                }
            }
        }
        SpectralCube::new(16, 16, 2, data).unwrap()
    };
    let (a0, b0) = (crop(&a, 0, 0), crop(&b, 0, 0));
    let (a1, b1) = (crop(&a, 3, 5), crop(&b, 3, 5));
    // shifting both images by the same amount and cropping the same region
    let shift = |c: &SpectralCube| {
        let mut data = vec![0.0; 24 * 24 * 2];
        for y in 0..21 {
            for x in 0..19 {
                for n in 0..2 {
                    data[((y + 3) * 24 + x + 5) * 2 + n] = c.get(y, x, n);
                }
            }
        }
        SpectralCube::new(24, 24, 2, data).unwrap()
    };
    let (sa, sb) = (crop(&shift(&a), 3, 5), crop(&shift(&b), 3, 5));
    assert!((ssim(&a0, &b0).unwrap() - ssim(&sa, &sb).unwrap()).abs() < 1e-12);
    assert!(ssim(&a1, &b1).unwrap() <= 1.0);
}

proptest! {
    #[test]
    fn charbonnier_is_at_least_eps(seed in any::<u64>(), eps in 1e-6f64..1e-1) {
        let a = generate_scene(&SceneSpec::new(4, 4, 2, seed)).unwrap();
        let b = generate_scene(&SceneSpec::new(4, 4, 2, seed.wrapping_add(1))).unwrap();
        prop_assert!(charbonnier_loss(&a, &b, eps).unwrap() >= eps);
        prop_assert!((charbonnier_loss(&a, &a, eps).unwrap() - eps).abs() < 1e-15);
    }

    #[test]
    fn psnr_decreases_with_mse(m1 in 1e-8f64..10.0, factor in 1.0001f64..100.0) {
        prop_assert!(psnr_from_mse(m1 * factor, 1.0) < psnr_from_mse(m1, 1.0));
    }
}

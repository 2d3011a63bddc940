use std::sync::Arc;

use hsi_autodiff::{Graph, LinearOperator, ParamStore, Tensor, Var};
use hsi_core::cassi::{self, CassiOperator, CodedMask, DispersionSpec, SpectralCube};
use hsi_core::fista::{gradient_step, SolverConfig, SolverState};
use hsi_core::net::blocks::{GatedFfn, Gla, Isa, Pna};
use hsi_core::net::gradcheck::composite_cases;
use hsi_core::net::layers::{randomize, Builder};
use hsi_core::net::{build_nhat, Asp, AttentionKind, Network, NetworkConfig, SensingInputs};
use hsi_core::scene::{generate_scene, SceneSpec};
use hsi_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::brute_force_pna;

fn small(stages: usize) -> NetworkConfig {
    NetworkConfig {
        stages,
        channels: 4,
        base_channels: 4,
        ..NetworkConfig::default()
    }
}

fn build<M>(seed: u64, scale: Option<f64>, make: impl FnOnce(&mut Builder) -> M) -> (M, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = make(&mut Builder {
        store: &mut store,
        rng: &mut rng,
    });
    if let Some(s) = scale {
        randomize(&mut store, s, &mut rng);
    }
    (m, store)
}

fn constants(g: &mut Graph, store: &ParamStore) -> Vec<Var> {
    store.tensors().map(|t| g.constant(t.clone())).collect()
}

fn scene(h: usize, w: usize, c: usize, seed: u64) -> SpectralCube {
    generate_scene(&SceneSpec::new(h, w, c, seed)).unwrap()
}

#[test]
fn pna_with_unit_pool_is_window_attention() {
    for (h, w) in [(4, 4), (8, 12)] {
        let (pna, store) = build(3, Some(0.6), |b| Pna::new(b, "pna", 4, 2, 4, 1, true));
        let x = Tensor::uniform(&[h, w, 4], -1.0, 1.0, 11);
        let mut g = Graph::new();
        let p = constants(&mut g, &store);
        let xv = g.constant(x.clone());
        let out = pna.forward(&mut g, &p, xv).unwrap();
        let expect = brute_force_pna(&pna, &store, &x);
        let diff = g
            .value(out)
            .data()
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{h}x{w}: {diff}");
    }
}

#[test]
fn pooled_attention_matches_brute_force() {
    let (pna, store) = build(4, Some(0.6), |b| Pna::new(b, "pna", 4, 2, 4, 2, true));
    let x = Tensor::uniform(&[8, 8, 4], -1.0, 1.0, 12);
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let xv = g.constant(x.clone());
    let out = pna.forward(&mut g, &p, xv).unwrap();
    let expect = brute_force_pna(&pna, &store, &x);
    assert!(g
        .value(out)
        .data()
        .iter()
        .zip(&expect)
        .all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn attention_weights_sum_to_one() {
    let (pna, store) = build(5, Some(0.8), |b| Pna::new(b, "pna", 4, 2, 4, 1, true));
    let x = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, 13);
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let xv = g.constant(x.clone());
    let (weights, _) = pna.attention(&mut g, &p, xv).unwrap();
    assert_eq!(g.shape(weights), &[1, 2, 16, 16]);
    let wt = g.value(weights).data();
    for row in wt.chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // head 0, query 5 against a direct softmax of the scaled dot products
    let wq = store.get(pna.query.as_ref().unwrap().weight).data();
    let bq = store.get(pna.query.as_ref().unwrap().bias.unwrap()).data();
    let wk = store.get(pna.key.as_ref().unwrap().weight).data();
    let tok = |t: usize| &x.data()[t * 4..t * 4 + 4];
    let proj = |v: &[f64], wt: &[f64], bias: Option<&[f64]>, o: usize| {
        bias.map(|b| b[o]).unwrap_or(0.0) + (0..4).map(|i| v[i] * wt[i * 4 + o]).sum::<f64>()
    };
    let q: Vec<f64> = (0..2).map(|o| proj(tok(5), wq, Some(bq), o)).collect();
    let s: Vec<f64> = (0..16)
        .map(|t| (0..2).map(|o| q[o] * proj(tok(t), wk, None, o)).sum::<f64>() / 2f64.sqrt())
        .collect();
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    for t in 0..16 {
        assert!((wt[5 * 16 + t] - s[t].exp() / z).abs() < 1e-12);
    }
}

#[test]
fn pna_constant_field_stays_constant() {
    let (pna, store) = build(6, Some(0.5), |b| Pna::new(b, "pna", 4, 2, 4, 2, true));
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let x = g.constant(Tensor::new(vec![8, 8, 4], [0.3, -0.2, 0.7, 0.1].repeat(64)).unwrap());
    let out = pna.forward(&mut g, &p, x).unwrap();
    let v = g.value(out).data();
    for tok in v.chunks(4) {
        for (a, b) in tok.iter().zip(&v[..4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pna_rejects_indivisible_extents() {
    let (pna, store) = build(1, None, |b| Pna::new(b, "pna", 4, 2, 4, 2, true));
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let x = g.constant(Tensor::zeros(&[6, 8, 4]));
    assert!(matches!(pna.forward(&mut g, &p, x), Err(Error::Shape(_))));
}

#[test]
fn gla_zero_input_and_bounds() {
    let (gla, store) = build(7, None, |b| Gla::new(b, "gla", 4));
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let zero = g.constant(Tensor::zeros(&[4, 4, 4]));
    let out = gla.forward(&mut g, &p, zero).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));

    let (gla, store) = build(8, Some(0.7), |b| Gla::new(b, "gla", 4));
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let x = g.constant(Tensor::uniform(&[6, 6, 4], -2.0, 2.0, 1));
    let out = gla.forward(&mut g, &p, x).unwrap();
    let value = gla.value.forward(&mut g, &p, x).unwrap();
    for (o, v) in g.value(out).data().iter().zip(g.value(value).data()) {
        assert!(o.abs() < v.abs() || (o.abs() == 0.0 && v.abs() == 0.0));
    }
}

#[test]
fn gated_ffn_zero_gate_is_zero() {
    let (ffn, mut store) = build(9, Some(0.5), |b| GatedFfn::new(b, "ffn", 4, 2));
    store.get_mut(ffn.gate.weight).data_mut().fill(0.0);
    store.get_mut(ffn.gate.bias.unwrap()).data_mut().fill(0.0);
    store.get_mut(ffn.down.bias.unwrap()).data_mut().fill(0.0);
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let x = g.constant(Tensor::uniform(&[4, 4, 4], -1.0, 1.0, 2));
    let out = ffn.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(out), &[4, 4, 4]);
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn nhat_with_zeroed_projections_is_identity() {
    let cfg = small(1);
    let (block, mut store) = build(10, Some(0.5), |b| build_nhat(b, "nhat", 4, &cfg));
    for lin in [&block.nlha.proj, &block.ffn.down] {
        store.get_mut(lin.weight).data_mut().fill(0.0);
        store.get_mut(lin.bias.unwrap()).data_mut().fill(0.0);
    }
    let x = Tensor::uniform(&[8, 8, 4], -1.0, 1.0, 3);
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let xv = g.constant(x.clone());
    let out = block.forward(&mut g, &p, xv).unwrap();
    assert_eq!(g.value(out), &x);
}

#[test]
fn nlha_branch_switches() {
    for (pna, gla) in [(true, false), (false, true), (true, true)] {
        let cfg = NetworkConfig {
            use_pna: pna,
            use_gla: gla,
            ..small(1)
        };
        let (block, store) = build(11, Some(0.5), |b| build_nhat(b, "nhat", 4, &cfg));
        assert_eq!(block.nlha.pna.is_some(), pna);
        assert_eq!(block.nlha.gla.is_some(), gla);
        let mut g = Graph::new();
        let p = constants(&mut g, &store);
        let x = g.constant(Tensor::uniform(&[8, 8, 4], -1.0, 1.0, 4));
        let out = block.nlha.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out), &[8, 8, 4]);
        if !gla {
            // projection of the PNA branch alone
            let a = block.nlha.pna.as_ref().unwrap().forward(&mut g, &p, x).unwrap();
            let e = block.nlha.proj.forward(&mut g, &p, a).unwrap();
            assert_eq!(g.value(out), g.value(e));
        }
    }
    let both_off = NetworkConfig {
        use_pna: false,
        use_gla: false,
        ..small(1)
    };
    assert!(matches!(both_off.validate(), Err(Error::Invalid(_))));
}

#[test]
fn isa_gates_are_bounded_and_first_stage_is_identity() {
    let (isa, store) = build(12, Some(1.0), |b| Isa::new(b, "isa", 8, 4));
    let mut g = Graph::new();
    let p = constants(&mut g, &store);
    let x = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, 5);
    let xv = g.constant(x.clone());
    let same = isa.forward(&mut g, &p, xv, None).unwrap();
    assert_eq!(same, xv);
    let summary = g.constant(Tensor::uniform(&[2, 2, 8], -1.0, 1.0, 6));
    let coeff = isa.coefficients(&mut g, &p, summary).unwrap();
    assert!(g.value(coeff).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let out = isa.forward(&mut g, &p, xv, Some(summary)).unwrap();
    for (o, i) in g.value(out).data().iter().zip(x.data()) {
        assert!(o.abs() <= i.abs());
    }
}

#[test]
fn nlia_shape_and_identity_at_init() {
    let net = Network::new(NetworkConfig::default()).unwrap();
    let r = Tensor::uniform(&[32, 32, 8], 0.0, 1.0, 7);
    let mut g = Graph::new();
    let p = constants(&mut g, net.params());
    let rv = g.constant(r.clone());
    let (x, bn) = net.stages()[0].nlia.forward(&mut g, &p, rv, None).unwrap();
    assert_eq!(g.value(x), &r);
    assert_eq!(g.shape(bn), &[8, 8, 64]);
}

fn sensing(h: usize, w: usize, c: usize, seed: u64) -> (SpectralCube, CodedMask, DispersionSpec, cassi::Measurement) {
    let cube = scene(h, w, c, seed);
    let mask = CodedMask::random_binary(h, w, seed + 1);
    let spec = DispersionSpec::new(1);
    let y = cassi::forward(&cube, &mask, &spec).unwrap();
    (cube, mask, spec, y)
}

#[test]
fn unfolded_shape_law() {
    let (_, mask, spec, y) = sensing(32, 32, 8, 1);
    assert_eq!((y.height(), y.width()), (32, 39));
    for k in [3, 6, 9] {
        let net = Network::new(NetworkConfig {
            stages: k,
            ..NetworkConfig::default()
        })
        .unwrap();
        let x = net.reconstruct(&y, &mask, &spec).unwrap();
        assert_eq!(x.dims(), (32, 32, 8));
    }
}

#[test]
fn frozen_step_head_is_the_scalar_gradient_step() {
    let (_, mask, spec, _) = sensing(4, 4, 3, 2);
    let z = scene(4, 4, 3, 9);
    let y = cassi::simulate(&scene(4, 4, 3, 10), &mask, &spec, 0.0, 0).unwrap();
    let rho = 0.37;
    for adaptive in [true, false] {
        let (asp, mut store) = build(13, Some(0.5), |b| Asp::new(b, "asp", 3, adaptive, 0.2));
        asp.freeze(&mut store, rho).unwrap();
        let op: Arc<dyn LinearOperator> = Arc::new(CassiOperator::new(&mask, &spec, 3).unwrap());
        let mut g = Graph::new();
        let p = constants(&mut g, &store);
        let zv = g.constant(Tensor::new(vec![4, 4, 3], z.data().to_vec()).unwrap());
        let yv = g.constant(Tensor::new(vec![4, 6], y.data().to_vec()).unwrap());
        let (r, steps) = asp.forward(&mut g, &p, &op, zv, yv).unwrap();
        let expect = gradient_step(&z, &y, &mask, &spec, rho).unwrap();
        assert!(g.value(steps).data().iter().all(|s| (s - rho).abs() < 1e-14));
        let diff = g
            .value(r)
            .data()
            .iter()
            .zip(expect.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn zero_residual_net_follows_the_identity_prox_trajectory() {
    let (_, mask, spec, y) = sensing(16, 16, 4, 3);
    let rho = 0.2;
    let mut net = Network::new(NetworkConfig { stages: 4, ..small(4) }).unwrap();
    net.freeze_step_sizes(rho).unwrap();
    let inputs = SensingInputs::new(&y, &mask, &spec, 4).unwrap();
    let mut g = Graph::new();
    let (_, out) = net.forward(&mut g, &inputs).unwrap();
    let cfg = SolverConfig::new(rho, 0.0, 4);
    let mut state = SolverState::init(&y, &spec, 4, 16).unwrap();
    for (k, &x) in out.iterates.iter().enumerate() {
        state.advance(&y, &mask, &spec, &cfg).unwrap();
        let diff = g
            .value(x)
            .data()
            .iter()
            .zip(state.x_curr.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "stage {k}: {diff}");
    }
}

#[test]
fn every_stage_receives_gradient() {
    let mut net = Network::new(NetworkConfig {
        use_pna_transformer: true,
        ..small(3)
    })
    .unwrap();
    randomize(net.params_mut(), 0.4, &mut ChaCha8Rng::seed_from_u64(1));
    let (cube, mask, spec, y) = sensing(16, 16, 4, 4);
    let inputs = SensingInputs::new(&y, &mask, &spec, 4).unwrap();
    let mut g = Graph::new();
    let (p, out) = net.forward(&mut g, &inputs).unwrap();
    let gt = g.constant(Tensor::new(vec![16, 16, 4], cube.data().to_vec()).unwrap());
    let loss = g.charbonnier(out.output(), gt, 1e-3).unwrap();
    g.backward(loss).unwrap();
    for (id, name, _) in net.params().iter() {
        let live = g.grad(p[id.0]).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
        if name.starts_with("stage0.") && name.contains(".isa.") {
            assert!(!live, "{name} is unused in the first stage");
        } else {
            assert!(live, "{name} has an identically zero gradient");
        }
    }
}

#[test]
fn stages_have_equal_parameter_counts() {
    for cfg in [
        NetworkConfig::default(),
        small(3),
        NetworkConfig {
            use_asp: false,
            ..small(2)
        },
    ] {
        let net = Network::new(cfg).unwrap();
        let counts = net.stage_param_counts();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), net.num_scalars());
    }
}

#[test]
fn ablation_switches_change_topology_in_the_documented_direction() {
    let full = Network::new(NetworkConfig::default()).unwrap().num_scalars();
    let count = |f: fn(&mut NetworkConfig)| {
        let mut c = NetworkConfig::default();
        f(&mut c);
        Network::new(c).unwrap().num_scalars()
    };
    assert!(count(|c| c.use_gla = false) < full);
    assert!(count(|c| c.use_pna = false) < full);
    assert!(count(|c| c.use_isa = false) < full);
    assert!(count(|c| c.use_asp = false) < full);
    assert!(count(|c| c.use_pna_transformer = false) < full);
    assert_eq!(count(|c| c.attention = AttentionKind::Wmsa), full);
    let (_, mask, spec, y) = sensing(32, 32, 8, 5);
    for f in [
        (|c: &mut NetworkConfig| c.use_gla = false) as fn(&mut NetworkConfig),
        |c| c.use_pna = false,
        |c| c.use_isa = false,
        |c| c.use_asp = false,
        |c| c.use_pna_transformer = false,
        |c| c.attention = AttentionKind::Wmsa,
    ] {
        let mut c = NetworkConfig {
            stages: 2,
            ..NetworkConfig::default()
        };
        f(&mut c);
        let x = Network::new(c).unwrap().reconstruct(&y, &mask, &spec).unwrap();
        assert_eq!(x.dims(), (32, 32, 8));
    }
}

#[test]
fn config_validation() {
    let bad = [
        NetworkConfig {
            levels: 2,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            pool_factor: 3,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            num_heads: 3,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            stages: 0,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            init_step: 0.0,
            ..NetworkConfig::default()
        },
    ];
    for c in bad {
        assert!(Network::new(c).is_err());
    }
    let wmsa = NetworkConfig {
        pool_factor: 3,
        attention: AttentionKind::Wmsa,
        ..NetworkConfig::default()
    };
    assert!(wmsa.validate().is_ok());
    let cfg = NetworkConfig::default();
    assert!(cfg.check_extents(32, 48).is_ok());
    assert!(cfg.check_extents(32, 40).is_err());
}

#[test]
fn bad_extents_are_reported_with_stage_context() {
    let net = Network::new(small(2)).unwrap();
    let mask = CodedMask::random_binary(16, 20, 1);
    let spec = DispersionSpec::new(1);
    let y = cassi::forward(&scene(16, 20, 4, 1), &mask, &spec).unwrap();
    assert!(matches!(net.reconstruct(&y, &mask, &spec), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_reproduces_output() {
    let mut net = Network::new(small(2)).unwrap();
    randomize(net.params_mut(), 0.3, &mut ChaCha8Rng::seed_from_u64(8));
    let mut bytes = Vec::new();
    net.save(&mut bytes).unwrap();
    let loaded = Network::load(small(2), bytes.as_slice()).unwrap();
    let (_, mask, spec, y) = sensing(16, 16, 4, 6);
    assert_eq!(
        net.reconstruct(&y, &mask, &spec).unwrap(),
        loaded.reconstruct(&y, &mask, &spec).unwrap()
    );
    assert!(Network::load(small(3), bytes.as_slice()).is_err());
}

#[test]
fn composite_gradients() {
    for case in composite_cases() {
        let report = (case.run)(0).unwrap();
        assert!(
            report.max_rel_error < case.tolerance(),
            "{}: {:.3e} at {:?}",
            case.name,
            report.max_rel_error,
            report.worst
        );
    }
}

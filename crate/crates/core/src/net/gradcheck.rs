//! Finite-difference checks of whole network blocks, with every parameter
//! and the block input treated as differentiable leaves.

use std::sync::Arc;

use hsi_autodiff::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, TOL_NONLINEAR};
use hsi_autodiff::{Graph, LinearOperator, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{GatedFfn, Gla, Isa, Nlha, Pna};
use super::layers::{randomize, Builder};
use super::{build_nhat, Asp, Network, NetworkConfig};
use crate::cassi::{CassiOperator, CodedMask, DispersionSpec};
use crate::error::Result;

pub struct CompositeCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

impl CompositeCase {
    pub fn tolerance(&self) -> f64 {
        TOL_NONLINEAR
    }
}

/// Scale of the random re-initialization; it keeps zero-initialized output
/// layers from masking upstream gradients.
const REINIT: f64 = 0.4;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        stages: 1,
        channels: 4,
        base_channels: 4,
        window_size: 4,
        pool_factor: 2,
        num_heads: 2,
        ffn_expansion: 2,
        ..NetworkConfig::default()
    }
}

fn build<M>(seed: u64, make: impl FnOnce(&mut Builder) -> M) -> (M, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = make(&mut Builder {
        store: &mut store,
        rng: &mut rng,
    });
    randomize(&mut store, REINIT, &mut rng);
    (m, store)
}

fn run_block<M>(
    module: &M,
    store: &ParamStore,
    data: Vec<Tensor>,
    cfg: &GradCheckConfig,
    f: impl Fn(&M, &mut Graph, &[Var], &[Var]) -> hsi_autodiff::Result<Var>,
) -> Result<GradCheckReport> {
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.tensors().cloned().collect();
    inputs.extend(data);
    Ok(check_gradients(|g, v| f(module, g, &v[..n], &v[n..]), &inputs, cfg)?)
}

fn lift<T>(r: Result<T>) -> hsi_autodiff::Result<T> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => hsi_autodiff::TensorError::Shape {
            op: "composite",
            detail: other.to_string(),
        },
    })
}

fn features(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, seed ^ 0x5eed)
}

fn full_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

/// Jacobian-vector checks only: deep in the unrolled network single
/// coordinates carry gradients near the central-difference rounding floor.
fn directional_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        max_coords_per_input: 0,
        directions_per_input: 3,
        ..GradCheckConfig::default()
    }
}

fn gla(seed: u64) -> Result<GradCheckReport> {
    let (m, store) = build(seed, |b| Gla::new(b, "gla", 4));
    run_block(
        &m,
        &store,
        vec![features(&[8, 8, 4], seed)],
        &full_cfg(seed),
        |m, g, p, x| lift(m.forward(g, p, x[0])),
    )
}

fn pna_with(seed: u64, pool: usize) -> Result<GradCheckReport> {
    let (m, store) = build(seed, |b| Pna::new(b, "pna", 4, 2, 4, pool, true));
    run_block(
        &m,
        &store,
        vec![features(&[8, 8, 4], seed)],
        &full_cfg(seed),
        |m, g, p, x| lift(m.forward(g, p, x[0])),
    )
}

fn pna(seed: u64) -> Result<GradCheckReport> {
    pna_with(seed, 2)
}

fn pna_wmsa(seed: u64) -> Result<GradCheckReport> {
    pna_with(seed, 1)
}

fn gated_ffn(seed: u64) -> Result<GradCheckReport> {
    let (m, store) = build(seed, |b| GatedFfn::new(b, "ffn", 4, 2));
    run_block(
        &m,
        &store,
        vec![features(&[8, 8, 4], seed)],
        &full_cfg(seed),
        |m, g, p, x| lift(m.forward(g, p, x[0])),
    )
}

fn nlha(seed: u64) -> Result<GradCheckReport> {
    let cfg = small_config();
    let (m, store) = build(seed, |b| -> Nlha { build_nhat(b, "nhat", 4, &cfg).nlha });
    run_block(
        &m,
        &store,
        vec![features(&[8, 8, 4], seed)],
        &full_cfg(seed),
        |m, g, p, x| lift(m.forward(g, p, x[0])),
    )
}

fn nhat(seed: u64) -> Result<GradCheckReport> {
    let cfg = small_config();
    let (m, store) = build(seed, |b| build_nhat(b, "nhat", 4, &cfg));
    run_block(
        &m,
        &store,
        vec![features(&[8, 8, 4], seed)],
        &full_cfg(seed),
        |m, g, p, x| lift(m.forward(g, p, x[0])),
    )
}

fn isa(seed: u64) -> Result<GradCheckReport> {
    let (m, store) = build(seed, |b| Isa::new(b, "isa", 8, 4));
    let data = vec![features(&[8, 8, 4], seed), features(&[2, 2, 8], seed + 1)];
    run_block(&m, &store, data, &full_cfg(seed), |m, g, p, x| {
        lift(m.forward(g, p, x[0], Some(x[1])))
    })
}

fn asp(seed: u64) -> Result<GradCheckReport> {
    let mask = CodedMask::random_binary(4, 4, seed);
    let spec = DispersionSpec::new(1);
    let op: Arc<dyn LinearOperator> = Arc::new(CassiOperator::new(&mask, &spec, 3)?);
    let (m, store) = build(seed, |b| Asp::new(b, "asp", 3, true, 0.2));
    let data = vec![
        Tensor::uniform(&[4, 4, 3], 0.0, 1.0, seed),
        Tensor::uniform(&[4, 6], 0.0, 2.0, seed + 1),
    ];
    run_block(&m, &store, data, &full_cfg(seed), |m, g, p, x| {
        lift(m.forward(g, p, &op, x[0], x[1])).map(|(r, _)| r)
    })
}

/// One-stage network on a 16x16x4 cube; parameters and the initial iterate
/// are the differentiated inputs.
fn aspun_1stage(seed: u64) -> Result<GradCheckReport> {
    let cfg = NetworkConfig { seed, ..small_config() };
    let mut net = Network::new(cfg)?;
    randomize(net.params_mut(), REINIT, &mut ChaCha8Rng::seed_from_u64(seed));
    let mask = CodedMask::random_binary(16, 16, seed);
    let spec = DispersionSpec::new(1);
    let op: Arc<dyn LinearOperator> = Arc::new(CassiOperator::new(&mask, &spec, 4)?);
    let y = Tensor::uniform(&[16, 19], 0.0, 2.0, seed);
    let init = Tensor::uniform(&[16, 16, 4], 0.0, 1.0, seed + 1);
    let n = net.params().len();
    let mut inputs: Vec<Tensor> = net.params().tensors().cloned().collect();
    inputs.push(init);
    let f = |g: &mut Graph, v: &[Var]| {
        let yv = g.constant(y.clone());
        lift(net.unfold(g, &v[..n], &op, yv, v[n])).map(|u| u.output())
    };
    Ok(check_gradients(f, &inputs, &directional_cfg(seed))?)
}

/// GLA, PNA, gated FFN, NLHA, NHAT, ISA, ASP and a one-stage network.
pub fn composite_cases() -> Vec<CompositeCase> {
    vec![
        CompositeCase { name: "gla", run: gla },
        CompositeCase { name: "pna", run: pna },
        CompositeCase {
            name: "pna_wmsa",
            run: pna_wmsa,
        },
        CompositeCase {
            name: "gated_ffn",
            run: gated_ffn,
        },
        CompositeCase {
            name: "nlha",
            run: nlha,
        },
        CompositeCase {
            name: "nhat",
            run: nhat,
        },
        CompositeCase { name: "isa", run: isa },
        CompositeCase { name: "asp", run: asp },
        CompositeCase {
            name: "aspun_1stage",
            run: aspun_1stage,
        },
    ]
}

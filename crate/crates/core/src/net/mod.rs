//! Deep unfolding of the accelerated proximal gradient iteration: each stage
//! takes a per-band adaptive gradient step, applies a learned prior network,
//! then extrapolates with the FISTA momentum sequence.

mod asp;
pub mod blocks;
mod config;
pub mod gradcheck;
pub mod layers;
mod nlia;

use std::io::{Read, Write};
use std::sync::Arc;

use hsi_autodiff::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use hsi_autodiff::{Graph, LinearOperator, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use asp::{softplus_inverse, Asp, StepHead, STEP_EPS};
pub use config::{AttentionKind, NetworkConfig};
pub use nlia::{build_nhat, Level, Nlia};

use crate::cassi::{self, CassiOperator, CodedMask, DispersionSpec, Measurement, SpectralCube};
use crate::error::{shape, Error, Result};
use crate::fista::{extrapolation_coefficient, momentum_update};
use layers::Builder;

#[derive(Debug, Clone)]
pub struct Stage {
    pub asp: Asp,
    pub nlia: Nlia,
}

/// Everything the network needs from one measurement.
#[derive(Debug, Clone)]
pub struct SensingInputs {
    pub op: Arc<dyn LinearOperator>,
    /// `[H, W + d(C-1)]`.
    pub y: Tensor,
    /// `shift_back(y)` as `[H, W, C]`, the starting iterate.
    pub init: Tensor,
}

impl SensingInputs {
    pub fn new(y: &Measurement, mask: &CodedMask, spec: &DispersionSpec, channels: usize) -> Result<Self> {
        let op = CassiOperator::new(mask, spec, channels)?;
        if y.height() != mask.height() || y.width() != op.measurement_width() {
            return Err(shape(format!(
                "measurement {}x{} does not match mask {}x{} with {channels} bands",
                y.height(),
                y.width(),
                mask.height(),
                mask.width()
            )));
        }
        let x0 = cassi::shift_back(y, spec, channels, mask.width())?;
        Ok(Self {
            op: Arc::new(op),
            y: Tensor::new(vec![y.height(), y.width()], y.data().to_vec())?,
            init: Tensor::new(vec![x0.height(), x0.width(), x0.channels()], x0.into_data())?,
        })
    }
}

/// Stage outputs of one unfolded pass; `iterates[k]` is `x^{k+1}`.
#[derive(Debug, Clone)]
pub struct Unfolded {
    pub iterates: Vec<Var>,
    pub steps: Vec<Var>,
}

impl Unfolded {
    pub fn output(&self) -> Var {
        *self.iterates.last().expect("at least one stage")
    }
}

#[derive(Debug)]
pub struct Network {
    config: NetworkConfig,
    stages: Vec<Stage>,
    params: ParamStore,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let stages = (0..config.stages)
            .map(|k| Stage {
                asp: Asp::new(
                    &mut b,
                    &format!("stage{k}.asp"),
                    config.channels,
                    config.use_asp,
                    config.init_step,
                ),
                nlia: Nlia::new(&mut b, &format!("stage{k}.nlia"), &config),
            })
            .collect();
        Ok(Self { config, stages, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar parameter count of each stage.
    pub fn stage_param_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.stages.len()];
        for (_, name, t) in self.params.iter() {
            let k: usize = name
                .strip_prefix("stage")
                .and_then(|s| s.split('.').next())
                .and_then(|s| s.parse().ok())
                .expect("parameter names start with a stage prefix");
            counts[k] += t.len();
        }
        counts
    }

    /// Pins every stage's step-size head to the constant `rho`.
    pub fn freeze_step_sizes(&mut self, rho: f64) -> Result<()> {
        for s in &self.stages {
            s.asp.freeze(&mut self.params, rho)?;
        }
        Ok(())
    }

    /// Records the unfolded iteration on `g`. `p` holds one variable per
    /// parameter, indexed by `ParamId`.
    pub fn unfold(
        &self,
        g: &mut Graph,
        p: &[Var],
        op: &Arc<dyn LinearOperator>,
        y: Var,
        init: Var,
    ) -> Result<Unfolded> {
        if p.len() != self.params.len() {
            return Err(shape(format!(
                "{} parameter vars for {} parameters",
                p.len(),
                self.params.len()
            )));
        }
        let s = g.shape(init).to_vec();
        if s.len() != 3 || s[2] != self.config.channels {
            return Err(shape(format!(
                "initial iterate {:?} does not have {} bands",
                s, self.config.channels
            )));
        }
        self.config.check_extents(s[0], s[1])?;
        let mut x_curr = init;
        let mut z = init;
        let mut t = 1.0;
        let mut summary = None;
        let mut out = Unfolded {
            iterates: Vec::with_capacity(self.stages.len()),
            steps: Vec::with_capacity(self.stages.len()),
        };
        for (k, stage) in self.stages.iter().enumerate() {
            let wrap = |e: Error| Error::Stage {
                stage: k,
                source: Box::new(e),
            };
            let (r, rho) = stage.asp.forward(g, p, op, z, y).map_err(wrap)?;
            let (x, bn) = stage.nlia.forward(g, p, r, summary).map_err(wrap)?;
            let t_next = momentum_update(t);
            let beta = extrapolation_coefficient(t, t_next);
            z = if beta == 0.0 {
                x
            } else {
                let stepped = (|| -> Result<Var> {
                    let d = g.sub(x, x_curr)?;
                    let d = g.scale(d, beta)?;
                    Ok(g.add(x, d)?)
                })();
                stepped.map_err(wrap)?
            };
            x_curr = x;
            t = t_next;
            summary = Some(bn);
            out.iterates.push(x);
            out.steps.push(rho);
        }
        Ok(out)
    }

    /// Records the network on `g` with parameters and inputs as leaves.
    pub fn forward(&self, g: &mut Graph, inputs: &SensingInputs) -> Result<(Vec<Var>, Unfolded)> {
        let p = g.bind(&self.params);
        let y = g.constant(inputs.y.clone());
        let init = g.constant(inputs.init.clone());
        let out = self.unfold(g, &p, &inputs.op, y, init)?;
        Ok((p, out))
    }

    pub fn reconstruct(&self, y: &Measurement, mask: &CodedMask, spec: &DispersionSpec) -> Result<SpectralCube> {
        let inputs = SensingInputs::new(y, mask, spec, self.config.channels)?;
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.tensors().map(|t| g.constant(t.clone())).collect();
        let yv = g.constant(inputs.y.clone());
        let init = g.constant(inputs.init.clone());
        let out = self.unfold(&mut g, &p, &inputs.op, yv, init)?.output();
        let v = g.value(out);
        let s = v.shape();
        SpectralCube::new(s[0], s[1], s[2], v.data().to_vec())
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        Ok(write_checkpoint(&self.params, out)?)
    }

    /// Builds the network for `config` and overwrites its parameters.
    pub fn load<R: Read>(config: NetworkConfig, input: R) -> Result<Self> {
        let mut net = Self::new(config)?;
        let entries = read_checkpoint(input)?;
        load_into(&mut net.params, entries)?;
        Ok(net)
    }
}

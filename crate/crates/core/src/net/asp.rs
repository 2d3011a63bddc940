//! Per-band adaptive step sizes for the data-fidelity gradient step.

use std::sync::Arc;

use hsi_autodiff::{Graph, LinearOperator, ParamId, ParamStore, Var};

use super::layers::{Builder, Linear};
use crate::error::{Error, Result};

/// Floor added after the softplus so every step stays strictly positive.
pub const STEP_EPS: f64 = 1e-4;

/// `softplus^{-1}(v)` for `v > 0`.
pub fn softplus_inverse(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

#[derive(Debug, Clone)]
pub enum StepHead {
    /// `gap(g) -> fc (4C) -> gelu -> fc (C) -> softplus + eps`.
    Adaptive { fc1: Linear, fc2: Linear },
    /// One learnable step shared by all bands.
    Scalar { theta: ParamId },
}

#[derive(Debug, Clone)]
pub struct Asp {
    pub head: StepHead,
    pub channels: usize,
}

impl Asp {
    pub fn new(b: &mut Builder, name: &str, channels: usize, adaptive: bool, init_step: f64) -> Self {
        let bias = softplus_inverse(init_step - STEP_EPS);
        let head = if adaptive {
            let hidden = 4 * channels;
            let fc1 = Linear::new(b, &format!("{name}.fc1"), channels, hidden);
            let fc2 = Linear {
                weight: b.uniform(
                    format!("{name}.fc2.weight"),
                    &[hidden, channels],
                    0.1 / (hidden as f64).sqrt(),
                ),
                bias: Some(b.full(format!("{name}.fc2.bias"), &[channels], bias)),
            };
            StepHead::Adaptive { fc1, fc2 }
        } else {
            StepHead::Scalar {
                theta: b.full(format!("{name}.theta"), &[1], bias),
            }
        };
        Self { head, channels }
    }

    /// Pins the head's output to `rho` for every band and input.
    pub fn freeze(&self, store: &mut ParamStore, rho: f64) -> Result<()> {
        if !(rho > STEP_EPS) {
            return Err(Error::Invalid(format!("frozen step must exceed {STEP_EPS}, got {rho}")));
        }
        let b = softplus_inverse(rho - STEP_EPS);
        match &self.head {
            StepHead::Adaptive { fc2, .. } => {
                store.get_mut(fc2.weight).data_mut().fill(0.0);
                if let Some(bias) = fc2.bias {
                    store.get_mut(bias).data_mut().fill(b);
                }
            }
            StepHead::Scalar { theta } => store.get_mut(*theta).data_mut().fill(b),
        }
        Ok(())
    }

    /// Step sizes `[C]` from the gradient cube `g: [H, W, C]`.
    pub fn steps(&self, g: &mut Graph, p: &[Var], grad: Var) -> Result<Var> {
        let raw = match &self.head {
            StepHead::Adaptive { fc1, fc2 } => {
                let s = g.global_avg_pool(grad)?;
                let s = g.reshape(s, &[1, self.channels])?;
                let h = fc1.forward(g, p, s)?;
                let h = g.gelu(h)?;
                let h = fc2.forward(g, p, h)?;
                g.reshape(h, &[self.channels])?
            }
            StepHead::Scalar { theta } => {
                let copies = vec![p[theta.0]; self.channels];
                g.concat(&copies, 0)?
            }
        };
        let rho = g.softplus(raw)?;
        Ok(g.add_scalar(rho, STEP_EPS)?)
    }

    /// `r = z - rho * A^T (A z - y)`; returns `(r, rho)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        op: &Arc<dyn LinearOperator>,
        z: Var,
        y: Var,
    ) -> Result<(Var, Var)> {
        let az = g.linear(z, op.clone(), false)?;
        let res = g.sub(az, y)?;
        let grad = g.linear(res, op.clone(), true)?;
        let rho = self.steps(g, p, grad)?;
        let step = g.mul(grad, rho)?;
        Ok((g.sub(z, step)?, rho))
    }
}

//! Parameterized building blocks shared by the network modules.

use hsi_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Allocates named parameters from a seeded stream.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform_with(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// Re-draws every parameter uniformly in `[-scale, scale]`, keeping shapes.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

/// `x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self::with_bound(b, name, cin, cout, 1.0 / (cin as f64).sqrt())
    }

    pub fn with_bound(b: &mut Builder, name: &str, cin: usize, cout: usize, bound: f64) -> Self {
        Self {
            weight: b.uniform(format!("{name}.weight"), &[cin, cout], bound),
            bias: Some(b.zeros(format!("{name}.bias"), &[cout])),
        }
    }

    pub fn without_bias(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: b.uniform(format!("{name}.weight"), &[cin, cout], 1.0 / (cin as f64).sqrt()),
            bias: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight.0])?;
        match self.bias {
            Some(b) => Ok(g.add(y, p[b.0])?),
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let bound = 1.0 / ((kernel * kernel * cin) as f64).sqrt();
        Self {
            weight: b.uniform(format!("{name}.weight"), &[kernel, kernel, cin, cout], bound),
            bias: b.zeros(format!("{name}.bias"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn zeroed(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, pad: usize) -> Self {
        Self {
            weight: b.zeros(format!("{name}.weight"), &[kernel, kernel, cin, cout]),
            bias: b.zeros(format!("{name}.bias"), &[cout]),
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight.0], self.stride, self.pad, 1)?;
        Ok(g.add(y, p[self.bias.0])?)
    }
}

/// 2x2 stride-2 transposed convolution, doubling the spatial extents.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / ((4 * cin) as f64).sqrt();
        Self {
            weight: b.uniform(format!("{name}.weight"), &[2, 2, cout, cin], bound),
            bias: b.zeros(format!("{name}.bias"), &[cout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv_transpose2d(x, p[self.weight.0], 2, 0, 1)?;
        Ok(g.add(y, p[self.bias.0])?)
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            gamma: b.full(format!("{name}.gamma"), &[channels], 1.0),
            beta: b.zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma.0], p[self.beta.0], LN_EPS)?)
    }
}

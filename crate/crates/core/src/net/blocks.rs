//! Token mixers and the transformer block of the reconstruction U-Net.
//! Features are `[H, W, C]`.

use hsi_autodiff::{Graph, Var};

use super::layers::{Builder, Conv, LayerNorm, Linear};
use crate::error::{shape, Result};

/// Window attention whose keys and values come from a `p x p` average-pooled
/// copy of the input, so each `b x b` query window sees `(b/p)^2` tokens.
#[derive(Debug, Clone)]
pub struct Pna {
    /// `None` when the attention itself is ablated.
    pub query: Option<Linear>,
    pub key: Option<Linear>,
    pub value: Linear,
    pub proj: Linear,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub pool: usize,
}

impl Pna {
    pub fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        pool: usize,
        attention: bool,
    ) -> Self {
        let (query, key) = if attention {
            (
                Some(Linear::new(b, &format!("{name}.q"), channels, channels)),
                // a key bias shifts every score of a query equally and cancels in the softmax
                Some(Linear::without_bias(b, &format!("{name}.k"), channels, channels)),
            )
        } else {
            (None, None)
        };
        Self {
            query,
            key,
            value: Linear::new(b, &format!("{name}.v"), channels, channels),
            proj: Linear::new(b, &format!("{name}.proj"), channels, channels),
            channels,
            heads,
            window,
            pool,
        }
    }

    fn check(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.channels {
            return Err(shape(format!("pna expects [H, W, {}], got {:?}", self.channels, s)));
        }
        if !s[0].is_multiple_of(self.window) || !s[1].is_multiple_of(self.window) {
            return Err(shape(format!(
                "pna: {}x{} not divisible by window {}",
                s[0], s[1], self.window
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Splits `[nW, T, C]` into heads, `[nW, heads, T, C/heads]`.
    fn heads_of(&self, g: &mut Graph, t: Var, perm: &[usize]) -> Result<Var> {
        let s = g.shape(t).to_vec();
        let r = g.reshape(t, &[s[0], s[1], self.heads, self.channels / self.heads])?;
        Ok(g.permute(r, perm)?)
    }

    /// Softmax attention weights `[nW, heads, b^2, (b/p)^2]` and values
    /// `[nW, heads, (b/p)^2, C/heads]`.
    pub fn attention(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Var)> {
        self.check(g, x)?;
        let (Some(query), Some(key)) = (&self.query, &self.key) else {
            return Err(shape("pna attention is disabled in this configuration"));
        };
        let pooled = if self.pool > 1 {
            g.avg_pool2d(x, self.pool, self.pool, 0)?
        } else {
            x
        };
        let inner = self.window / self.pool;
        let q = query.forward(g, p, x)?;
        let q = g.window_partition(q, self.window)?;
        let q = self.heads_of(g, q, &[0, 2, 1, 3])?;
        let k = key.forward(g, p, pooled)?;
        let k = g.window_partition(k, inner)?;
        let k = self.heads_of(g, k, &[0, 2, 3, 1])?;
        let v = self.value.forward(g, p, pooled)?;
        let v = g.window_partition(v, inner)?;
        let v = self.heads_of(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, 1.0 / ((self.channels / self.heads) as f64).sqrt())?;
        let weights = g.softmax(scores, 3)?;
        Ok((weights, v))
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let (h, w) = self.check(g, x)?;
        if self.query.is_none() {
            let v = self.value.forward(g, p, x)?;
            return self.proj.forward(g, p, v);
        }
        let (weights, v) = self.attention(g, p, x)?;
        let out = g.matmul(weights, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let nw = g.shape(out)[0];
        let out = g.reshape(out, &[nw, self.window * self.window, self.channels])?;
        let out = g.window_merge(out, h, w, self.window)?;
        self.proj.forward(g, p, out)
    }
}

/// Local attention: `sigmoid(pw(gelu(conv3x3(x)))) * pw(x)`.
#[derive(Debug, Clone)]
pub struct Gla {
    pub context: Conv,
    pub score: Linear,
    pub value: Linear,
}

impl Gla {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            context: Conv::new(b, &format!("{name}.context"), channels, channels, 3, 1, 1),
            score: Linear::new(b, &format!("{name}.score"), channels, channels),
            value: Linear::new(b, &format!("{name}.value"), channels, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let c = self.context.forward(g, p, x)?;
        let c = g.gelu(c)?;
        let c = self.score.forward(g, p, c)?;
        let c = g.sigmoid(c)?;
        let v = self.value.forward(g, p, x)?;
        Ok(g.mul(c, v)?)
    }
}

/// `pw(pna(x) + gla(x))`; a disabled branch has no parameters.
#[derive(Debug, Clone)]
pub struct Nlha {
    pub pna: Option<Pna>,
    pub gla: Option<Gla>,
    pub proj: Linear,
}

impl Nlha {
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mixed = match (&self.pna, &self.gla) {
            (Some(a), Some(b)) => {
                let u = a.forward(g, p, x)?;
                let v = b.forward(g, p, x)?;
                g.add(u, v)?
            }
            (Some(a), None) => a.forward(g, p, x)?,
            (None, Some(b)) => b.forward(g, p, x)?,
            (None, None) => return Err(shape("nlha needs at least one branch")),
        };
        self.proj.forward(g, p, mixed)
    }
}

/// `pw(gelu(pw(x)) * pw(x))`.
#[derive(Debug, Clone)]
pub struct GatedFfn {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl GatedFfn {
    pub fn new(b: &mut Builder, name: &str, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        Self {
            gate: Linear::new(b, &format!("{name}.gate"), channels, hidden),
            up: Linear::new(b, &format!("{name}.up"), channels, hidden),
            down: Linear::new(b, &format!("{name}.down"), hidden, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let gate = self.gate.forward(g, p, x)?;
        let gate = g.gelu(gate)?;
        let up = self.up.forward(g, p, x)?;
        let h = g.mul(gate, up)?;
        self.down.forward(g, p, h)
    }
}

/// `u = x + nlha(ln(x))`, `out = u + ffn(ln(u))`.
#[derive(Debug, Clone)]
pub struct Nhat {
    pub norm1: LayerNorm,
    pub nlha: Nlha,
    pub norm2: LayerNorm,
    pub ffn: GatedFfn,
}

impl Nhat {
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, p, x)?;
        let a = self.nlha.forward(g, p, n)?;
        let u = g.add(x, a)?;
        let n = self.norm2.forward(g, p, u)?;
        let f = self.ffn.forward(g, p, n)?;
        Ok(g.add(u, f)?)
    }
}

/// Channel gates for one level, computed from the previous stage's
/// bottleneck features.
#[derive(Debug, Clone)]
pub struct Isa {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Isa {
    pub fn new(b: &mut Builder, name: &str, summary_channels: usize, channels: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), summary_channels, channels),
            fc2: Linear::new(b, &format!("{name}.fc2"), channels, channels),
        }
    }

    /// Coefficients in `(0, 1)`, shape `[C]`.
    pub fn coefficients(&self, g: &mut Graph, p: &[Var], summary: Var) -> Result<Var> {
        let s = g.global_avg_pool(summary)?;
        let n = g.shape(s)[0];
        let s = g.reshape(s, &[1, n])?;
        let h = self.fc1.forward(g, p, s)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        let h = g.sigmoid(h)?;
        let c = g.shape(h)[1];
        Ok(g.reshape(h, &[c])?)
    }

    /// Identity when there is no previous stage.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, summary: Option<Var>) -> Result<Var> {
        match summary {
            None => Ok(x),
            Some(s) => {
                let c = self.coefficients(g, p, s)?;
                Ok(g.mul(x, c)?)
            }
        }
    }
}

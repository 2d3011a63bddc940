//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse pass.

use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map that can be spliced into a graph. Backward through
/// `apply` uses `apply_adjoint` and vice versa, so the pair must be exact
/// adjoints.
pub trait LinearOperator: fmt::Debug + Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    GlobalAvgPool(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    WindowPartition {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        b: usize,
    },
    WindowMerge {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        b: usize,
    },
    Sum(Var),
    Mean(Var),
    Charbonnier {
        pred: Var,
        target: Var,
        eps: f64,
    },
    Linear {
        x: Var,
        op: Arc<dyn LinearOperator>,
        adjoint: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations on tensors for later differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Whether `small` is a trailing suffix of `big`.
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every parameter of `store` as a leaf; the result is indexed
    /// by [`crate::ParamId`].
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        store.tensors().map(|t| self.leaf(t.clone())).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn broadcast_binary(&self, name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(shape_err(name, format!("{:?} does not broadcast against {:?}", sb, sa)));
        }
        Ok((sa.to_vec(), numel(sb)))
    }

    /// Elementwise sum; `b` may cover only the trailing extents of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, nb) = self.broadcast_binary("add", a, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("add", Tensor::new(shape, data)?, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, nb) = self.broadcast_binary("sub", a, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x - bv[i % nb])
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("sub", Tensor::new(shape, data)?, Op::Sub(a, b), rg)
    }

    /// Elementwise product; `b` may cover only the trailing extents of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, nb) = self.broadcast_binary("mul", a, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % nb])
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", Tensor::new(shape, data)?, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + s).collect())?;
        let rg = self.rg(&[a]);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    /// `[..., m, k] x [k, n]` (shared right operand) or
    /// `[..., m, k] x [..., k, n]` with identical leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", "operands must have rank >= 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let lead = &sa[..sa.len() - 2];
        let b_batched = sb.len() > 2;
        if b_batched && sb[..sb.len() - 2] != *lead {
            return Err(shape_err(
                "matmul",
                format!("batch extents differ: {:?} x {:?}", sa, sb),
            ));
        }
        let batch = numel(lead);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, m, k, n, b_batched);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::new(shape, data)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            rg,
        )
    }

    fn conv_geom(
        &self,
        name: &'static str,
        x: &[usize],
        w: &[usize],
        stride: usize,
        groups: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        if x.len() != 3 || w.len() != 4 {
            return Err(shape_err(
                name,
                format!("input {:?} must be [H,W,C], weight {:?} [kh,kw,ci,co]", x, w),
            ));
        }
        if stride == 0 || groups == 0 {
            return Err(shape_err(name, "stride and groups must be positive"));
        }
        Ok((x[0], x[1], x[2], w[0], w[1], w[2]))
    }

    /// 2D convolution of `x: [H, W, Cin]` with `w: [kh, kw, Cin/groups, Cout]`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (h, wd, cin, kh, kw, cig) = self.conv_geom("conv2d", self.shape(x), self.shape(w), stride, groups)?;
        let cout = self.shape(w)[3];
        if cin % groups != 0 || !cout.is_multiple_of(groups) || cig != cin / groups {
            return Err(shape_err(
                "conv2d",
                format!(
                    "channels {cin}->{cout} incompatible with groups {groups} and weight {:?}",
                    self.shape(w)
                ),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let rg = self.rg(&[x, w]);
        self.push(
            "conv2d",
            Tensor::new(vec![geom.ho, geom.wo, cout], data)?,
            Op::Conv2d { x, w, geom },
            rg,
        )
    }

    /// Adjoint of [`Graph::conv2d`] in its input: `x: [Hi, Wi, Cout]` with the
    /// conv2d weight layout `w: [kh, kw, Cin/groups, Cout]` produces
    /// `[(Hi-1)*stride - 2*pad + kh, ..., Cin]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (hi, wi, ci, kh, kw, cig) =
            self.conv_geom("conv_transpose2d", self.shape(x), self.shape(w), stride, groups)?;
        let cout = self.shape(w)[3];
        if ci != cout || !cout.is_multiple_of(groups) {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input channels {ci} vs weight {:?}", self.shape(w)),
            ));
        }
        let full_h = (hi - 1) * stride + kh;
        let full_w = (wi - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err("conv_transpose2d", "padding removes the whole output"));
        }
        let geom = ConvGeom {
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            cin: cig * groups,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho: hi,
            wo: wi,
        };
        let data = kernels::conv2d_backward_input(self.value(x).data(), self.value(w).data(), &geom);
        let rg = self.rg(&[x, w]);
        self.push(
            "conv_transpose2d",
            Tensor::new(vec![geom.h, geom.w, geom.cin], data)?,
            Op::ConvTranspose2d { x, w, geom },
            rg,
        )
    }

    /// Average pooling over `[H, W, C]`; the divisor is always `kernel^2`.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || kernel == 0 || stride == 0 || s[0] + 2 * pad < kernel || s[1] + 2 * pad < kernel {
            return Err(shape_err(
                "avg_pool2d",
                format!("input {:?}, kernel {kernel}, stride {stride}, pad {pad}", s),
            ));
        }
        let geom = PoolGeom {
            h: s[0],
            w: s[1],
            c: s[2],
            kernel,
            stride,
            pad,
            ho: (s[0] + 2 * pad - kernel) / stride + 1,
            wo: (s[1] + 2 * pad - kernel) / stride + 1,
        };
        let data = kernels::avg_pool_forward(self.value(x).data(), &geom);
        let rg = self.rg(&[x]);
        self.push(
            "avg_pool2d",
            Tensor::new(vec![geom.ho, geom.wo, geom.c], data)?,
            Op::AvgPool { x, geom },
            rg,
        )
    }

    /// Mean over every axis but the last: `[..., C] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("global_avg_pool", "scalar input"));
        }
        let c = *s.last().unwrap();
        let t = self.value(x);
        let rows = t.len() / c.max(1);
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let rg = self.rg(&[x]);
        self.push("global_avg_pool", Tensor::new(vec![c], out)?, Op::GlobalAvgPool(x), rg)
    }

    /// Normalizes over the last extent, then applies `gamma`/`beta` (both `[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", format!("affine params must be [{c}]")));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / c);
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = kernels::axis_split(self.shape(x), axis);
        let data = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "softmax",
            Tensor::new(shape, data)?,
            Op::Softmax { x, outer, len, inner },
            rg,
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(name, out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, kernels::softplus, Op::Softplus(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(shape_err("concat", format!("{:?} vs {:?} along axis {axis}", s, base)));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in inputs.iter().zip(&lens) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                lens,
            },
            rg,
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} exceeds extent {}", start + len, s[axis]),
            ));
        }
        let (outer, full, inner) = kernels::axis_split(&s, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            data.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            "slice",
            Tensor::new(shape, data)?,
            Op::Slice {
                x,
                outer,
                inner,
                full,
                start,
                len,
            },
            rg,
        )
    }

    /// Splits `x` along `axis` into pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis("split", x, axis)?;
        if sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(shape_err(
                "split",
                format!("sizes {:?} do not cover extent {}", sizes, self.shape(x)[axis]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "permute",
                format!("{:?} is not a permutation of rank {}", perm, s.len()),
            ));
        }
        let data = kernels::permute(self.value(x).data(), &s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[x]);
        self.push(
            "permute",
            Tensor::new(shape, data)?,
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        )
    }

    /// `[H, W, C] -> [(H/b)*(W/b), b*b, C]`.
    pub fn window_partition(&mut self, x: Var, b: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("window_partition", format!("expected [H,W,C], got {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if b == 0 || h % b != 0 || w % b != 0 {
            return Err(TensorError::Window {
                window: b,
                height: h,
                width: w,
            });
        }
        let data = kernels::window_partition(self.value(x).data(), h, w, c, b);
        let rg = self.rg(&[x]);
        self.push(
            "window_partition",
            Tensor::new(vec![(h / b) * (w / b), b * b, c], data)?,
            Op::WindowPartition { x, h, w, c, b },
            rg,
        )
    }

    /// Inverse of [`Graph::window_partition`] for an `h x w` grid.
    pub fn window_merge(&mut self, x: Var, h: usize, w: usize, b: usize) -> Result<Var> {
        if b == 0 || !h.is_multiple_of(b) || !w.is_multiple_of(b) {
            return Err(TensorError::Window {
                window: b,
                height: h,
                width: w,
            });
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != (h / b) * (w / b) || s[1] != b * b {
            return Err(shape_err(
                "window_merge",
                format!("{:?} is not a {b}x{b} partition of {h}x{w}", s),
            ));
        }
        let c = s[2];
        let data = kernels::window_merge(self.value(x).data(), h, w, c, b);
        let rg = self.rg(&[x]);
        self.push(
            "window_merge",
            Tensor::new(vec![h, w, c], data)?,
            Op::WindowMerge { x, h, w, c, b },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `mean(sqrt((pred - target)^2 + eps^2))`.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                "charbonnier",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let e2 = eps * eps;
        let s = p
            .iter()
            .zip(t)
            .map(|(a, b)| ((a - b) * (a - b) + e2).sqrt())
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        self.push(
            "charbonnier",
            Tensor::scalar(s),
            Op::Charbonnier { pred, target, eps },
            rg,
        )
    }

    /// Applies `op` (or its adjoint) to `x`.
    pub fn linear(&mut self, x: Var, op: Arc<dyn LinearOperator>, adjoint: bool) -> Result<Var> {
        let (want, out_shape) = if adjoint {
            (op.output_shape(), op.input_shape())
        } else {
            (op.input_shape(), op.output_shape())
        };
        if self.shape(x) != want.as_slice() {
            return Err(shape_err(
                "linear",
                format!("operator expects {:?}, got {:?}", want, self.shape(x)),
            ));
        }
        let xv = self.value(x).data();
        let data = if adjoint { op.apply_adjoint(xv) } else { op.apply(xv) };
        let rg = self.rg(&[x]);
        self.push(
            "linear",
            Tensor::new(out_shape, data)?,
            Op::Linear { x, op, adjoint },
            rg,
        )
    }

    /// Reverse sweep from a one-element `loss`; afterwards [`Graph::grad`]
    /// returns `d loss / d v` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of a broadcast operand: folds `g` over the leading repeats.
    fn fold_broadcast(g: &[f64], nb: usize) -> Vec<f64> {
        let mut out = vec![0.0; nb];
        for chunk in g.chunks(nb) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                if need(*b) {
                    let nb = val(*b).len();
                    self.acc(grads, *b, Self::fold_broadcast(g, nb));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                if need(*b) {
                    let nb = val(*b).len();
                    let gb = Self::fold_broadcast(g, nb).into_iter().map(|v| -v).collect();
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                if need(*a) {
                    let ga = g.iter().enumerate().map(|(j, gv)| gv * bv[j % nb]).collect();
                    self.acc(grads, *a, ga);
                }
                if need(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    self.acc(grads, *b, Self::fold_broadcast(&prod, nb));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, g.to_vec()),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                if need(*a) {
                    let ga = kernels::matmul_grad_a(g, val(*b), *batch, *m, *k, *n, *b_batched);
                    self.acc(grads, *a, ga);
                }
                if need(*b) {
                    let gb = kernels::matmul_grad_b(g, val(*a), *batch, *m, *k, *n, *b_batched);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                if need(*x) {
                    self.acc(grads, *x, kernels::conv2d_backward_input(g, val(*w), geom));
                }
                if need(*w) {
                    self.acc(grads, *w, kernels::conv2d_backward_weight(val(*x), g, geom));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                if need(*x) {
                    self.acc(grads, *x, kernels::conv2d_forward(g, val(*w), geom));
                }
                if need(*w) {
                    self.acc(grads, *w, kernels::conv2d_backward_weight(g, val(*x), geom));
                }
            }
            Op::AvgPool { x, geom } => self.acc(grads, *x, kernels::avg_pool_backward(g, geom)),
            Op::GlobalAvgPool(x) => {
                let n = val(*x).len();
                let c = g.len();
                let rows = (n / c) as f64;
                let gx = (0..n).map(|j| g[j % c] / rows).collect();
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let c = gam.len();
                if need(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    self.acc(grads, *gamma, Self::fold_broadcast(&prod, c));
                }
                if need(*beta) {
                    self.acc(grads, *beta, Self::fold_broadcast(g, c));
                }
                if need(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let range = r * c..(r + 1) * c;
                        let gr = &g[range.clone()];
                        let xh = &xhat[range.clone()];
                        let gxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let m1 = gxh.iter().sum::<f64>() / c as f64;
                        let m2 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = is * (gxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                self.acc(grads, *x, kernels::softmax_backward(out, g, *outer, *len, *inner));
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, v)| gv * kernels::gelu_grad(*v))
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = g.iter().zip(val(*x)).map(|(gv, v)| gv * kernels::sigmoid(*v)).collect();
                self.acc(grads, *x, gx);
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &l) in inputs.iter().zip(lens) {
                    if need(v) {
                        let mut gv = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + l * inner]);
                        }
                        self.acc(grads, v, gv);
                    }
                    offset += l;
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                full,
                start,
                len,
            } => {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..*outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[i].value.shape();
                let gx = kernels::permute(g, out_shape, &kernels::inverse_perm(perm));
                self.acc(grads, *x, gx);
            }
            Op::WindowPartition { x, h, w, c, b } => {
                self.acc(grads, *x, kernels::window_merge(g, *h, *w, *c, *b));
            }
            Op::WindowMerge { x, h, w, c, b } => {
                self.acc(grads, *x, kernels::window_partition(g, *h, *w, *c, *b));
            }
            Op::Sum(x) => self.acc(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Charbonnier { pred, target, eps } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = g[0] / p.len() as f64;
                let e2 = eps * eps;
                let gp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        let d = a - b;
                        scale * d / (d * d + e2).sqrt()
                    })
                    .collect();
                if need(*target) {
                    self.acc(grads, *target, gp.iter().map(|v| -v).collect());
                }
                self.acc(grads, *pred, gp);
            }
            Op::Linear { x, op, adjoint } => {
                let gx = if *adjoint { op.apply(g) } else { op.apply_adjoint(g) };
                self.acc(grads, *x, gx);
            }
        }
    }
}

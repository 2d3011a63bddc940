//! Central finite-difference checks of recorded gradients.
//!
//! The scalar being differentiated is `sum(f(inputs) * R)` for a fixed random
//! projection `R`, so every output element contributes to the check.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, LinearOperator, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Inputs with more elements than this are checked on a random subset.
    pub max_coords_per_input: usize,
    /// Random-direction (Jacobian-vector) checks per input.
    pub directions_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_input: usize::MAX,
            directions_per_input: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate check;
    /// coordinate `None` marks a directional check.
    pub worst: (usize, Option<usize>),
    pub checks: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences, coordinatewise and along random directions.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = Tensor::uniform_with(g.shape(out), -1.0, 1.0, &mut rng);
    let pv = g.constant(proj.clone());
    let weighted = g.mul(out, pv)?;
    let loss = g.sum(weighted)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.shape(out) != proj.shape() {
            return Err(TensorError::Shape {
                op: "check_gradients",
                detail: "output shape changed under perturbation".into(),
            });
        }
        Ok(g.value(out).clone())
    };
    // Differencing outputs before projecting avoids cancellation in the sum.
    let central = |plus: &Tensor, minus: &Tensor, h: f64| -> f64 {
        plus.data()
            .iter()
            .zip(minus.data())
            .zip(proj.data())
            .map(|((p, m), r)| (p - m) * r)
            .sum::<f64>()
            / (2.0 * h)
    };

    let h = cfg.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, None),
        checks: 0,
    };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords_per_input).into_vec()
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let err = rel_error(analytic[i].data()[j], central(&plus, &minus, h));
            report.checks += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, Some(j));
            }
        }
        for _ in 0..cfg.directions_per_input {
            let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let along = |sign: f64| -> Tensor {
                let mut t = inputs[i].clone();
                t.data_mut().iter_mut().zip(&dir).for_each(|(v, d)| *v += sign * h * d);
                t
            };
            work[i] = along(1.0);
            let plus = eval(&work)?;
            work[i] = along(-1.0);
            let minus = eval(&work)?;
            work[i] = inputs[i].clone();
            let an: f64 = analytic[i].data().iter().zip(&dir).map(|(a, d)| a * d).sum();
            let err = rel_error(an, central(&plus, &minus, h));
            report.checks += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, None);
            }
        }
    }
    Ok(report)
}

/// Explicit dense matrix as a [`LinearOperator`], `y = A x` with `A`
/// stored row-major `[rows, cols]`.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f64>,
}

impl LinearOperator for DenseOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cols]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.rows]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, yv) in self.matrix.chunks(self.cols).zip(y) {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += a * yv);
        }
        out
    }
}

type BuildFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One differentiable op registered for gradient checking.
#[derive(Clone)]
pub struct OpCase {
    pub name: &'static str,
    /// Linear (or bilinear) ops are held to the tighter tolerance.
    pub linear: bool,
    /// Three representative input-shape sets.
    pub shapes: Vec<Vec<Vec<usize>>>,
    /// Keep random inputs at least this far from zero (kinks).
    pub min_abs: f64,
    pub build: BuildFn,
}

impl std::fmt::Debug for OpCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpCase")
            .field("name", &self.name)
            .field("linear", &self.linear)
            .finish()
    }
}

pub const TOL_NONLINEAR: f64 = 1e-4;
pub const TOL_LINEAR: f64 = 1e-7;

impl OpCase {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            TOL_LINEAR
        } else {
            TOL_NONLINEAR
        }
    }
}

fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
    v.iter().map(|x| x.to_vec()).collect()
}

fn groups_of(g: &Graph, x: Var, w: Var) -> usize {
    g.shape(x)[2] / g.shape(w)[2]
}

fn dense_for(n: usize) -> Arc<DenseOperator> {
    let rows = n + 2;
    let m = Tensor::uniform(&[rows, n], -1.0, 1.0, 99).into_data();
    Arc::new(DenseOperator {
        rows,
        cols: n,
        matrix: m,
    })
}

/// Every primitive the engine differentiates, with the shapes it is checked at.
pub fn registered_ops() -> Vec<OpCase> {
    let case = |name, linear, shapes, build: BuildFn| OpCase {
        name,
        linear,
        shapes,
        min_abs: 0.0,
        build,
    };
    let bin = || vec![s(&[&[3, 4], &[4]]), s(&[&[2, 3, 2], &[2, 3, 2]]), s(&[&[5], &[5]])];
    let un = || vec![s(&[&[3, 4]]), s(&[&[2, 3, 5]]), s(&[&[7]])];
    let img = || vec![s(&[&[4, 4, 3]]), s(&[&[6, 4, 2]]), s(&[&[2, 8, 1]])];
    let mut ops = vec![
        case("add", true, bin(), |g, v| g.add(v[0], v[1])),
        case("sub", true, bin(), |g, v| g.sub(v[0], v[1])),
        case("mul", true, bin(), |g, v| g.mul(v[0], v[1])),
        case("scale", true, un(), |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", true, un(), |g, v| g.add_scalar(v[0], 0.3)),
        case(
            "matmul",
            true,
            vec![
                s(&[&[3, 4], &[4, 2]]),
                s(&[&[2, 3, 4], &[2, 4, 5]]),
                s(&[&[2, 2, 3, 2], &[2, 3]]),
            ],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "conv2d",
            true,
            vec![
                s(&[&[4, 4, 2], &[3, 3, 2, 3]]),
                s(&[&[5, 5, 4], &[3, 3, 2, 4]]),
                s(&[&[3, 6, 1], &[1, 1, 1, 2]]),
            ],
            |g, v| {
                let k = g.shape(v[1])[0];
                let groups = groups_of(g, v[0], v[1]);
                g.conv2d(v[0], v[1], 1, k / 2, groups)
            },
        ),
        case(
            "conv2d_strided",
            true,
            vec![
                s(&[&[6, 6, 2], &[4, 4, 2, 3]]),
                s(&[&[5, 7, 4], &[3, 3, 2, 2]]),
                s(&[&[4, 4, 1], &[4, 4, 1, 2]]),
            ],
            |g, v| {
                let groups = groups_of(g, v[0], v[1]);
                g.conv2d(v[0], v[1], 2, 1, groups)
            },
        ),
        case(
            "conv_transpose2d",
            true,
            vec![
                s(&[&[3, 3, 4], &[2, 2, 2, 4]]),
                s(&[&[2, 4, 4], &[2, 2, 1, 4]]),
                s(&[&[3, 2, 2], &[3, 3, 3, 2]]),
            ],
            |g, v| {
                let cout = g.shape(v[1])[3];
                let cin_g = g.shape(v[1])[2];
                // groups chosen so that cin_g * groups stays <= cout
                let groups = if cin_g * 2 <= cout && cout % 2 == 0 { 2 } else { 1 };
                g.conv_transpose2d(v[0], v[1], 2, 0, groups)
            },
        ),
        case(
            "avg_pool2d",
            true,
            vec![s(&[&[4, 4, 3]]), s(&[&[6, 2, 2]]), s(&[&[2, 8, 1]])],
            |g, v| g.avg_pool2d(v[0], 2, 2, 0),
        ),
        case("avg_pool2d_padded", true, img(), |g, v| g.avg_pool2d(v[0], 3, 1, 1)),
        case("global_avg_pool", true, img(), |g, v| g.global_avg_pool(v[0])),
        case(
            "layer_norm",
            false,
            vec![
                s(&[&[3, 4], &[4], &[4]]),
                s(&[&[2, 2, 5], &[5], &[5]]),
                s(&[&[6], &[6], &[6]]),
            ],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("softmax", false, un(), |g, v| {
            let last = g.shape(v[0]).len() - 1;
            g.softmax(v[0], last)
        }),
        case("softmax_axis0", false, un(), |g, v| g.softmax(v[0], 0)),
        case("sigmoid", false, un(), |g, v| g.sigmoid(v[0])),
        case("gelu", false, un(), |g, v| g.gelu(v[0])),
        case("softplus", false, un(), |g, v| g.softplus(v[0])),
        case(
            "concat",
            true,
            vec![s(&[&[3, 2], &[3, 4]]), s(&[&[2, 2, 1], &[2, 2, 3]]), s(&[&[4], &[1]])],
            |g, v| {
                let last = g.shape(v[0]).len() - 1;
                g.concat(&[v[0], v[1]], last)
            },
        ),
        case("split", true, un(), |g, v| {
            let last = g.shape(v[0]).len() - 1;
            let n = g.shape(v[0])[last];
            let parts = g.split(v[0], last, &[1, n - 1])?;
            let doubled = g.scale(parts[0], 2.0)?;
            g.concat(&[parts[1], doubled], last)
        }),
        case(
            "reshape",
            true,
            vec![s(&[&[3, 4]]), s(&[&[2, 3, 4]]), s(&[&[6]])],
            |g, v| {
                let n = g.value(v[0]).len();
                g.reshape(v[0], &[n / 2, 2])
            },
        ),
        case(
            "permute",
            true,
            vec![s(&[&[3, 4]]), s(&[&[2, 3, 4]]), s(&[&[2, 3, 2, 2]])],
            |g, v| {
                let rank = g.shape(v[0]).len();
                let perm: Vec<usize> = (0..rank).rev().collect();
                g.permute(v[0], &perm)
            },
        ),
        case(
            "window_partition",
            true,
            vec![s(&[&[4, 4, 2]]), s(&[&[2, 6, 1]]), s(&[&[6, 4, 3]])],
            |g, v| g.window_partition(v[0], 2),
        ),
        case(
            "window_merge",
            true,
            vec![s(&[&[4, 4, 2]]), s(&[&[1, 4, 3]]), s(&[&[6, 4, 1]])],
            |g, v| {
                // [nW, 4, C] merged as a 2-window-high strip
                let nw = g.shape(v[0])[0];
                let (h, w) = if nw % 2 == 0 { (4, nw) } else { (2, 2 * nw) };
                g.window_merge(v[0], h, w, 2)
            },
        ),
        case("sum", true, un(), |g, v| g.sum(v[0])),
        case("mean", true, un(), |g, v| g.mean(v[0])),
        case(
            "charbonnier",
            false,
            vec![s(&[&[3, 4], &[3, 4]]), s(&[&[2, 2, 2], &[2, 2, 2]]), s(&[&[5], &[5]])],
            |g, v| g.charbonnier(v[0], v[1], 1e-1),
        ),
        case(
            "linear_operator",
            true,
            vec![s(&[&[3]]), s(&[&[5]]), s(&[&[8]])],
            |g, v| {
                let n = g.shape(v[0])[0];
                g.linear(v[0], dense_for(n), false)
            },
        ),
        case(
            "linear_operator_adjoint",
            true,
            vec![s(&[&[5]]), s(&[&[7]]), s(&[&[10]])],
            |g, v| {
                let n = g.shape(v[0])[0] - 2;
                g.linear(v[0], dense_for(n), true)
            },
        ),
    ];
    ops.push(OpCase {
        name: "relu",
        linear: false,
        shapes: un(),
        min_abs: 0.05,
        build: |g, v| g.relu(v[0]),
    });
    ops
}

/// Random inputs for `case` at the given shapes.
pub fn random_inputs(case: &OpCase, shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let mut t = Tensor::uniform_with(s, -1.0, 1.0, &mut rng);
            if case.min_abs > 0.0 {
                for v in t.data_mut() {
                    if v.abs() < case.min_abs {
                        *v += v.signum() * case.min_abs;
                    }
                }
            }
            t
        })
        .collect()
}

/// Maximum relative error of one registered op at one shape set.
pub fn grad_check(case: &OpCase, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let inputs = random_inputs(case, shapes, seed);
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    Ok(check_gradients(case.build, &inputs, &cfg)?.max_rel_error)
}

pub fn find_op(name: &str) -> Option<OpCase> {
    registered_ops().into_iter().find(|c| c.name == name)
}

//! FISTA for `min_x 1/2 ||Phi x - y||^2 + lambda ||Psi x||_1` with a scalar
//! step, plus the momentum primitives the unfolding network reuses.

use std::f64::consts::PI;

use crate::cassi::{self, CodedMask, DispersionSpec, Measurement, SpectralCube};
use crate::error::{shape, Error, Result};

/// Sparsifying transform `Psi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transform {
    #[default]
    Identity,
    /// Orthonormal 2D DCT-II applied to each band.
    Dct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub step_size: f64,
    pub reg_weight: f64,
    pub max_iters: usize,
    pub transform: Transform,
    /// Stop once the relative objective change drops below this.
    pub tolerance: f64,
    /// `false` pins `t = 1`, which turns the iteration into ISTA.
    pub accelerated: bool,
}

impl SolverConfig {
    pub fn new(step_size: f64, reg_weight: f64, max_iters: usize) -> Self {
        Self {
            step_size,
            reg_weight,
            max_iters,
            transform: Transform::Identity,
            tolerance: 1e-8,
            accelerated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Invalid(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Invalid(format!(
                "regularization weight must be >= 0, got {}",
                self.reg_weight
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Orthonormal DCT-II matrix, row `k` holds basis vector `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = scale * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// Per-band separable transform `D_h X D_w^T` (or its transpose).
fn dct_bands(x: &[f64], h: usize, w: usize, c: usize, inverse: bool) -> Vec<f64> {
    let (dh, dw) = (dct_matrix(h), dct_matrix(w));
    let at = |m: &[f64], n: usize, r: usize, col: usize| if inverse { m[col * n + r] } else { m[r * n + col] };
    let mut tmp = vec![0.0; x.len()];
    for ky in 0..h {
        for y in 0..h {
            let a = at(&dh, h, ky, y);
            for xx in 0..w {
                for n in 0..c {
                    tmp[(ky * w + xx) * c + n] += a * x[(y * w + xx) * c + n];
                }
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for ky in 0..h {
        for kx in 0..w {
            for xx in 0..w {
                let a = at(&dw, w, kx, xx);
                for n in 0..c {
                    out[(ky * w + kx) * c + n] += a * tmp[(ky * w + xx) * c + n];
                }
            }
        }
    }
    out
}

impl Transform {
    pub fn analysis(&self, cube: &SpectralCube) -> Vec<f64> {
        match self {
            Transform::Identity => cube.data().to_vec(),
            Transform::Dct => {
                let (h, w, c) = cube.dims();
                dct_bands(cube.data(), h, w, c, false)
            }
        }
    }

    pub fn synthesis(&self, coeffs: Vec<f64>, like: &SpectralCube) -> SpectralCube {
        match self {
            Transform::Identity => like.like(coeffs),
            Transform::Dct => {
                let (h, w, c) = like.dims();
                like.like(dct_bands(&coeffs, h, w, c, true))
            }
        }
    }
}

fn residual_norm_sq(x: &SpectralCube, y: &Measurement, mask: &CodedMask, spec: &DispersionSpec) -> Result<f64> {
    let fx = cassi::forward(x, mask, spec)?;
    if fx.width() != y.width() || fx.height() != y.height() {
        return Err(shape(format!(
            "estimate maps to {}x{}, measurement is {}x{}",
            fx.height(),
            fx.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(fx.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `1/2 ||Phi x - y||^2 + lambda ||Psi x||_1`.
pub fn objective(
    x: &SpectralCube,
    y: &Measurement,
    mask: &CodedMask,
    spec: &DispersionSpec,
    cfg: &SolverConfig,
) -> Result<f64> {
    let fit = 0.5 * residual_norm_sq(x, y, mask, spec)?;
    if cfg.reg_weight == 0.0 {
        return Ok(fit);
    }
    let l1: f64 = cfg.transform.analysis(x).iter().map(|v| v.abs()).sum();
    Ok(fit + cfg.reg_weight * l1)
}

/// `z - rho * Phi^T (Phi z - y)`.
pub fn gradient_step(
    z: &SpectralCube,
    y: &Measurement,
    mask: &CodedMask,
    spec: &DispersionSpec,
    rho: f64,
) -> Result<SpectralCube> {
    let mut residual = cassi::forward(z, mask, spec)?;
    if residual.width() != y.width() || residual.height() != y.height() {
        return Err(shape("measurement does not match the estimate"));
    }
    residual.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a -= b);
    let g = cassi::adjoint(&residual, mask, spec, z.channels())?;
    let data = z.data().iter().zip(g.data()).map(|(a, b)| a - rho * b).collect();
    Ok(z.like(data))
}

/// Elementwise `sign(v) * max(|v| - theta, 0)`, the prox of `theta |.|`.
pub fn soft_threshold(v: &[f64], theta: f64) -> Vec<f64> {
    debug_assert!(theta >= 0.0);
    v.iter().map(|&x| shrink(x, theta)).collect()
}

#[inline]
pub fn shrink(x: f64, theta: f64) -> f64 {
    x.signum() * (x.abs() - theta).max(0.0)
}

/// `argmin_x 1/2 ||x - r||^2 + theta ||Psi x||_1` for orthonormal `Psi`.
pub fn prox(r: &SpectralCube, theta: f64, transform: Transform) -> SpectralCube {
    if theta == 0.0 {
        return r.clone();
    }
    let coeffs = soft_threshold(&transform.analysis(r), theta);
    transform.synthesis(coeffs, r)
}

/// `(1 + sqrt(1 + 4 t^2)) / 2`.
pub fn momentum_update(t: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
}

/// `(t - 1) / t_next`, the weight on `x^k - x^{k-1}`.
pub fn extrapolation_coefficient(t: f64, t_next: f64) -> f64 {
    (t - 1.0) / t_next
}

/// `x_curr + ((t - 1) / t_next) (x_curr - x_prev)`.
pub fn extrapolate(x_curr: &SpectralCube, x_prev: &SpectralCube, t: f64, t_next: f64) -> SpectralCube {
    let beta = extrapolation_coefficient(t, t_next);
    if beta == 0.0 {
        return x_curr.clone();
    }
    let data = x_curr
        .data()
        .iter()
        .zip(x_prev.data())
        .map(|(a, b)| a + beta * (a - b))
        .collect();
    x_curr.like(data)
}

/// Iterates of one solve.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x_curr: SpectralCube,
    pub x_prev: SpectralCube,
    pub z: SpectralCube,
    pub t: f64,
    pub iteration: usize,
}

impl SolverState {
    /// `x^0 = x^{-1} = z^1 = shift_back(y)`, `t^1 = 1`.
    pub fn init(y: &Measurement, spec: &DispersionSpec, channels: usize, width: usize) -> Result<Self> {
        let x0 = cassi::shift_back(y, spec, channels, width)?;
        Ok(Self {
            x_prev: x0.clone(),
            z: x0.clone(),
            x_curr: x0,
            t: 1.0,
            iteration: 0,
        })
    }

    /// One gradient step, prox, momentum update and extrapolation.
    pub fn advance(
        &mut self,
        y: &Measurement,
        mask: &CodedMask,
        spec: &DispersionSpec,
        cfg: &SolverConfig,
    ) -> Result<()> {
        let r = gradient_step(&self.z, y, mask, spec, cfg.step_size)?;
        let x = prox(&r, cfg.reg_weight * cfg.step_size, cfg.transform);
        let t_next = if cfg.accelerated { momentum_update(self.t) } else { 1.0 };
        self.z = extrapolate(&x, &self.x_curr, self.t, t_next);
        self.x_prev = std::mem::replace(&mut self.x_curr, x);
        self.t = t_next;
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: SpectralCube,
    pub initial_objective: f64,
    /// Objective after each iteration; its length is the iteration count.
    pub trace: Vec<f64>,
    pub converged: bool,
}

pub fn solve(
    y: &Measurement,
    mask: &CodedMask,
    spec: &DispersionSpec,
    channels: usize,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    let mut state = SolverState::init(y, spec, channels, mask.width())?;
    let initial_objective = objective(&state.x_curr, y, mask, spec, cfg)?;
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut prev = initial_objective;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        state.advance(y, mask, spec, cfg)?;
        let f = objective(&state.x_curr, y, mask, spec, cfg)?;
        if !f.is_finite() {
            return Err(Error::Diverged {
                iteration: state.iteration,
            });
        }
        trace.push(f);
        if (prev - f).abs() <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = f;
    }
    Ok(SolveResult {
        x: state.x_curr,
        initial_objective,
        trace,
        converged,
    })
}

/// Largest eigenvalue of `Phi^T Phi` by power iteration from the all-ones
/// vector. The returned Rayleigh quotient never decreases with `iters`.
pub fn power_iteration_lipschitz(
    mask: &CodedMask,
    spec: &DispersionSpec,
    channels: usize,
    iters: usize,
) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Invalid("power iteration needs at least one step".into()));
    }
    spec.validate(channels)?;
    let (h, w) = (mask.height(), mask.width());
    let d = spec.step;
    let mut v = vec![1.0; h * w * channels];
    let mut estimate = 0.0;
    for _ in 0..iters {
        let norm_sq: f64 = v.iter().map(|a| a * a).sum();
        let av = cassi::adjoint_raw(
            &cassi::forward_raw(&v, mask.values(), h, w, channels, d),
            mask.values(),
            h,
            w,
            channels,
            d,
        );
        let num: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        estimate = if norm_sq > 0.0 { num / norm_sq } else { 0.0 };
        let norm = av.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = av.into_iter().map(|a| a / norm).collect();
    }
    Ok(estimate)
}

pub const DEFAULT_POWER_ITERS: usize = 20;
pub const DEFAULT_STEP_FACTOR: f64 = 0.9;

/// `0.9 / L` with `L` from [`DEFAULT_POWER_ITERS`] power iterations.
pub fn default_step_size(mask: &CodedMask, spec: &DispersionSpec, channels: usize) -> Result<f64> {
    let l = power_iteration_lipschitz(mask, spec, channels, DEFAULT_POWER_ITERS)?;
    if l <= 0.0 {
        return Err(Error::Invalid("sensing operator is identically zero".into()));
    }
    Ok(DEFAULT_STEP_FACTOR / l)
}

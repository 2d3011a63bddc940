//! Charbonnier-loss training with Adam and cosine annealing.

use std::f64::consts::PI;
use std::path::Path;

use hsi_autodiff::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cassi::{self, CodedMask, DispersionSpec, SpectralCube};
use crate::error::{Error, Result};
use crate::format::write_atomic;
use crate::metrics::{psnr, ssim};
use crate::net::{Network, SensingInputs};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub charbonnier_eps: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_interval: usize,
    /// Measurement noise standard deviation, redrawn every step.
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 3e-4,
            lr_min: 1e-6,
            total_steps: 500,
            batch_size: 1,
            charbonnier_eps: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_interval: 100,
            noise_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.lr_initial > self.lr_min && self.lr_min >= 0.0) {
            return bad("learning rates must satisfy lr_initial > lr_min >= 0");
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be >= 1");
        }
        if !(self.charbonnier_eps > 0.0) {
            return bad("charbonnier_eps must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }
}

/// Mean of `sqrt((pred - gt)^2 + eps^2)`.
pub fn charbonnier_loss(pred: &SpectralCube, gt: &SpectralCube, eps: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid("charbonnier eps must be > 0".into()));
    }
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| ((a - b).powi(2) + eps * eps).sqrt())
        .sum::<f64>()
        / n)
}

/// `lr_min + (lr_initial - lr_min)(1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let frac = step.min(cfg.total_steps) as f64 / cfg.total_steps as f64;
    cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1.0 + (PI * frac).cos())
}

/// Bias-corrected first and second moment estimates, one pair per tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Ground-truth cube with its coded measurement inputs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cube: SpectralCube,
    pub inputs: SensingInputs,
}

impl Sample {
    pub fn new(
        cube: SpectralCube,
        mask: &CodedMask,
        spec: &DispersionSpec,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let y = cassi::simulate(&cube, mask, spec, noise_sigma, seed)?;
        let inputs = SensingInputs::new(&y, mask, spec, cube.channels())?;
        Ok(Self { cube, inputs })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Loss before this step's update.
    pub loss: f64,
    pub lr: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,psnr,ssim\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.trace {
            s.push_str(&format!(
                "{},{:.10e},{:.6e},{},{}\n",
                r.step,
                r.loss,
                r.lr,
                opt(r.psnr),
                opt(r.ssim)
            ));
        }
        s
    }
}

fn is_non_finite(e: &Error) -> bool {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => true,
        Error::Stage { source, .. } => is_non_finite(source),
        _ => false,
    }
}

fn cube_tensor(c: &SpectralCube) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![c.height(), c.width(), c.channels()],
        c.data().to_vec(),
    )?)
}

/// Mean Charbonnier loss of `batch` recorded on `g`.
fn batch_loss(net: &Network, g: &mut Graph, p: &[Var], batch: &[&Sample], eps: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in batch {
        let y = g.constant(s.inputs.y.clone());
        let init = g.constant(s.inputs.init.clone());
        let out = net.unfold(g, p, &s.inputs.op, y, init)?.output();
        let gt = g.constant(cube_tensor(&s.cube)?);
        let l = g.charbonnier(out, gt, eps)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    Ok(g.scale(total, 1.0 / batch.len() as f64)?)
}

/// Loss of the current parameters on `samples`, without recording gradients.
pub fn evaluate_loss(net: &Network, samples: &[Sample], eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p: Vec<Var> = net.params().tensors().map(|t| g.constant(t.clone())).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let l = batch_loss(net, &mut g, &p, &refs, eps)?;
    Ok(g.value(l).item())
}

/// Mean PSNR (peak 1) and SSIM of the network's reconstructions.
pub fn evaluate_metrics(net: &Network, samples: &[Sample]) -> Result<(f64, f64)> {
    let (mut ps, mut ss) = (0.0, 0.0);
    for s in samples {
        let mut g = Graph::new();
        let p: Vec<Var> = net.params().tensors().map(|t| g.constant(t.clone())).collect();
        let y = g.constant(s.inputs.y.clone());
        let init = g.constant(s.inputs.init.clone());
        let out = net.unfold(&mut g, &p, &s.inputs.op, y, init)?.output();
        let pred = s.cube.like(g.value(out).data().to_vec());
        ps += psnr(&pred, &s.cube, 1.0)?;
        ss += ssim(&pred, &s.cube)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((ps / n, ss / n))
}

/// Trains `net` in place. Batches are drawn without replacement per step
/// from a stream seeded by `cfg.seed`; with noise the measurements are
/// redrawn every step.
pub fn train(
    net: &mut Network,
    cfg: &TrainConfig,
    scenes: &[SpectralCube],
    mask: &CodedMask,
    spec: &DispersionSpec,
    held_out: &[SpectralCube],
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .map(|(i, c)| Sample::new(c.clone(), mask, spec, cfg.noise_sigma, cfg.seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let eval_samples: Vec<Sample> = held_out
        .iter()
        .enumerate()
        .map(|(i, c)| Sample::new(c.clone(), mask, spec, 0.0, i as u64))
        .collect::<Result<_>>()?;
    let batch = cfg.batch_size.min(samples.len());
    let mut adam = Adam::new(net.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        if cfg.noise_sigma > 0.0 && step > 0 {
            for (i, s) in samples.iter_mut().enumerate() {
                let seed = cfg.seed.wrapping_add((step * scenes.len() + i) as u64);
                *s = Sample::new(s.cube.clone(), mask, spec, cfg.noise_sigma, seed)?;
            }
        }
        let picked: Vec<&Sample> = sample(&mut rng, samples.len(), batch)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let mut g = Graph::new();
        let p = g.bind(net.params());
        let loss = batch_loss(net, &mut g, &p, &picked, cfg.charbonnier_eps).map_err(|e| {
            if is_non_finite(&e) {
                Error::NonFiniteLoss { step }
            } else {
                e
            }
        })?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(loss).map_err(|e| match e {
            TensorError::NonFinite { .. } => Error::NonFiniteLoss { step },
            other => other.into(),
        })?;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(net.params().tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(g);
        let lr = cosine_lr(step, cfg);
        adam.step(net.params_mut(), &grads, lr)?;
        let mut row = TraceRow {
            step,
            loss: value,
            lr,
            psnr: None,
            ssim: None,
        };
        let last = step + 1 == cfg.total_steps;
        if !eval_samples.is_empty() && ((cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) || last) {
            let (ps, ss) = evaluate_metrics(net, &eval_samples)?;
            row.psnr = Some(ps);
            row.ssim = Some(ss);
        }
        trace.push(row);
    }
    Ok(TrainReport { trace })
}

/// Writes `checkpoint.aspw` and `trace.csv` into `dir`.
pub fn write_outputs(dir: &Path, net: &Network, report: &TrainReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    net.save(&mut bytes)?;
    write_atomic(&dir.join("checkpoint.aspw"), &bytes)?;
    write_atomic(&dir.join("trace.csv"), report.to_csv().as_bytes())
}

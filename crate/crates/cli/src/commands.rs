//! Subcommand bodies. Each writes its report to `out` and returns errors
//! for `main` to map onto exit codes.

use std::io::Write;
use std::path::Path;

use hsi_autodiff::gradcheck::{grad_check, registered_ops};
use hsi_core::cassi::{self, CodedMask, DispersionSpec, Measurement, SpectralCube};
use hsi_core::fista::{self, SolverConfig};
use hsi_core::format::{band_pgm, cube_bytes, mask_bytes, measurement_bytes, read_hsc1, write_atomic};
use hsi_core::metrics::{psnr, ssim};
use hsi_core::net::gradcheck::composite_cases;
use hsi_core::net::Network;
use hsi_core::scene::{generate_scene, SceneSpec};
use hsi_core::train::{self, TrainReport};

use crate::config::{RunConfig, StepSetting};
use crate::{
    AblateArgs, Algo, CliError, CliResult, EvalArgs, ExportBandArgs, GradcheckArgs, ReconstructArgs, SimulateArgs,
    SynthArgs, TrainArgs,
};

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::parse(&std::fs::read_to_string(p)?)?),
        None => Ok(RunConfig::default()),
    }
}

fn read_cube(path: &Path) -> CliResult<SpectralCube> {
    Ok(read_hsc1(path)?.into_cube()?)
}

fn read_mask(path: &Path) -> CliResult<CodedMask> {
    Ok(read_hsc1(path)?.into_mask()?)
}

fn read_measurement(path: &Path) -> CliResult<Measurement> {
    Ok(read_hsc1(path)?.into_measurement()?)
}

pub fn synth(a: &SynthArgs, out: &mut impl Write) -> CliResult<()> {
    let cube = generate_scene(&SceneSpec::new(a.height, a.width, a.channels, a.seed))?;
    write_atomic(&a.cube, &cube_bytes(&cube))?;
    writeln!(
        out,
        "cube {}x{}x{} -> {}",
        a.height,
        a.width,
        a.channels,
        a.cube.display()
    )?;
    if let Some(path) = &a.mask {
        let mask = CodedMask::random_binary(a.height, a.width, a.seed);
        write_atomic(path, &mask_bytes(&mask))?;
        writeln!(out, "mask {}x{} -> {}", a.height, a.width, path.display())?;
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs, out: &mut impl Write) -> CliResult<()> {
    let cube = read_cube(&a.cube)?;
    let mask = read_mask(&a.mask)?;
    let spec = DispersionSpec::new(a.d);
    let y = cassi::simulate(&cube, &mask, &spec, a.noise, a.seed)?;
    write_atomic(&a.out, &measurement_bytes(&y))?;
    let (h, w, c) = cube.dims();
    writeln!(
        out,
        "cube {h}x{w}x{c}, d={}, noise={} -> measurement {}x{}",
        a.d,
        a.noise,
        y.height(),
        y.width()
    )?;
    Ok(())
}

/// Band count implied by a measurement of width `meas_width` over a mask of
/// width `width`.
fn infer_channels(meas_width: usize, width: usize, d: usize, given: Option<usize>) -> CliResult<usize> {
    let inferred = if d == 0 {
        if meas_width != width {
            return Err(CliError::Usage(format!(
                "with d = 0 the measurement width {meas_width} must equal the mask width {width}"
            )));
        }
        None
    } else {
        if meas_width < width || !(meas_width - width).is_multiple_of(d) {
            return Err(CliError::Usage(format!(
                "measurement width {meas_width} is not mask width {width} plus a multiple of d = {d}"
            )));
        }
        Some((meas_width - width) / d + 1)
    };
    match (inferred, given) {
        (Some(c), Some(g)) if c != g => Err(CliError::Usage(format!(
            "--channels {g} disagrees with {c} bands implied by the measurement width"
        ))),
        (Some(c), _) | (None, Some(c)) => Ok(c),
        (None, None) => Err(CliError::Usage("--channels is required when d = 0".into())),
    }
}

pub fn reconstruct(a: &ReconstructArgs, out: &mut impl Write) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let y = read_measurement(&a.meas)?;
    let mask = read_mask(&a.mask)?;
    if y.height() != mask.height() {
        return Err(CliError::Usage(format!(
            "measurement height {} differs from mask height {}",
            y.height(),
            mask.height()
        )));
    }
    let d = a.d.unwrap_or(cfg.data.dispersion);
    let spec = DispersionSpec::new(d);
    let given = match (a.algo, a.channels) {
        (Algo::Aspun, None) => Some(cfg.net.channels),
        (_, c) => c,
    };
    let channels = infer_channels(y.width(), mask.width(), d, given)?;

    let x = match a.algo {
        Algo::Fista => {
            let s = &cfg.solver;
            let step = match s.rho {
                StepSetting::Auto => fista::default_step_size(&mask, &spec, channels)?,
                StepSetting::Fixed(r) => r,
            };
            let solver = SolverConfig {
                transform: s.transform,
                tolerance: s.tolerance,
                accelerated: s.accelerated,
                ..SolverConfig::new(step, s.lambda, s.max_iters)
            };
            let result = fista::solve(&y, &mask, &spec, channels, &solver)?;
            if let Some(path) = &a.trace {
                let mut csv = String::from("iteration,objective\n");
                for (i, f) in result.trace.iter().enumerate() {
                    csv.push_str(&format!("{},{f:e}\n", i + 1));
                }
                write_atomic(path, csv.as_bytes())?;
            }
            let last = result.trace.last().copied().unwrap_or(result.initial_objective);
            writeln!(
                out,
                "fista: {} iterations, step {step:.6}, objective {:.6e} -> {last:.6e}{}",
                result.trace.len(),
                result.initial_objective,
                if result.converged { " (converged)" } else { "" }
            )?;
            result.x
        }
        Algo::Aspun => {
            let path = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Usage("--algo aspun requires --checkpoint".into()))?;
            if a.trace.is_some() {
                return Err(CliError::Usage("--trace is only available with --algo fista".into()));
            }
            if channels != cfg.net.channels {
                return Err(CliError::Usage(format!(
                    "measurement implies {channels} bands but net.channels = {}",
                    cfg.net.channels
                )));
            }
            let net = Network::load(cfg.net.clone(), std::io::BufReader::new(std::fs::File::open(path)?))?;
            let x = net.reconstruct(&y, &mask, &spec)?;
            writeln!(
                out,
                "aspun: {} stages, {} parameters",
                cfg.net.stages,
                net.num_scalars()
            )?;
            x
        }
    };
    write_atomic(&a.out, &cube_bytes(&x))?;
    let (h, w, c) = x.dims();
    writeln!(out, "cube {h}x{w}x{c} -> {}", a.out.display())?;
    Ok(())
}

struct Dataset {
    mask: CodedMask,
    spec: DispersionSpec,
    train: Vec<SpectralCube>,
    eval: Vec<SpectralCube>,
}

fn dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let d = &cfg.data;
    let scene = |i: usize| {
        let mut s = SceneSpec::new(d.height, d.width, cfg.net.channels, d.scene_seed.wrapping_add(i as u64));
        s.blob_count = d.blob_count;
        generate_scene(&s)
    };
    Ok(Dataset {
        mask: CodedMask::random_binary(d.height, d.width, d.mask_seed),
        spec: DispersionSpec::new(d.dispersion),
        train: (0..d.train_scenes).map(scene).collect::<Result<_, _>>()?,
        eval: (d.train_scenes..d.train_scenes + d.eval_scenes)
            .map(scene)
            .collect::<Result<_, _>>()?,
    })
}

fn train_network(cfg: &RunConfig, data: &Dataset) -> CliResult<(Network, TrainReport)> {
    let mut net = Network::new(cfg.net.clone())?;
    let report = train::train(&mut net, &cfg.train, &data.train, &data.mask, &data.spec, &data.eval)?;
    Ok((net, report))
}

fn final_metrics(report: &TrainReport) -> Option<(f64, f64)> {
    let row = report.trace.last()?;
    Some((row.psnr?, row.ssim?))
}

pub fn train(a: &TrainArgs, out: &mut impl Write) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = dataset(&cfg)?;
    let (net, report) = train_network(&cfg, &data)?;
    train::write_outputs(&a.out_dir, &net, &report)?;
    write_atomic(&a.out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    write_atomic(&a.out_dir.join("mask.hsc1"), &mask_bytes(&data.mask))?;
    let first = report.trace.first().map_or(f64::NAN, |r| r.loss);
    let last = report.trace.last().map_or(f64::NAN, |r| r.loss);
    writeln!(
        out,
        "trained {} steps, {} parameters, loss {first:.6} -> {last:.6}",
        report.trace.len(),
        net.num_scalars()
    )?;
    if let Some((p, s)) = final_metrics(&report) {
        writeln!(out, "held-out PSNR {p:.4} SSIM {s:.4}")?;
    }
    writeln!(out, "outputs in {}", a.out_dir.display())?;
    Ok(())
}

pub fn eval(a: &EvalArgs, out: &mut impl Write) -> CliResult<()> {
    let pred = read_cube(&a.pred)?;
    let gt = read_cube(&a.gt)?;
    let p = psnr(&pred, &gt, 1.0)?;
    let s = ssim(&pred, &gt)?;
    writeln!(out, "PSNR {p:.4}")?;
    writeln!(out, "SSIM {s:.4}")?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> CliResult<()> {
    let all = a.op == "all";
    let ops: Vec<_> = registered_ops().into_iter().filter(|c| all || c.name == a.op).collect();
    let blocks: Vec<_> = composite_cases()
        .into_iter()
        .filter(|c| all || c.name == a.op)
        .collect();
    if ops.is_empty() && blocks.is_empty() {
        return Err(CliError::Usage(format!("unknown gradcheck target {:?}", a.op)));
    }
    let mut total = 0;
    let mut failed = 0;
    let mut report = |out: &mut dyn Write, name: &str, err: f64, tol: f64| -> CliResult<()> {
        let ok = err <= tol;
        total += 1;
        if !ok {
            failed += 1;
        }
        writeln!(
            out,
            "{:<6} {name:<28} max_rel_err {err:.3e}  tol {tol:.0e}",
            if ok { "PASS" } else { "FAIL" }
        )?;
        Ok(())
    };
    for case in &ops {
        for (i, shapes) in case.shapes.iter().enumerate() {
            let err = grad_check(case, shapes, a.seed.wrapping_add(i as u64)).map_err(hsi_core::Error::from)?;
            report(out, &format!("{}[{i}]", case.name), err, case.tolerance())?;
        }
    }
    for case in &blocks {
        let r = (case.run)(a.seed)?;
        report(out, case.name, r.max_rel_error, case.tolerance())?;
    }
    writeln!(out, "{} checks, {failed} failed", total)?;
    if failed > 0 {
        return Err(CliError::ChecksFailed { failed, total });
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs, out: &mut impl Write) -> CliResult<()> {
    let base = load_config(a.config.as_deref())?;
    if base.data.eval_scenes == 0 {
        return Err(CliError::Usage("ablate needs data.eval_scenes >= 1".into()));
    }
    let mut switched = base.clone();
    for s in &a.switches {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--switch expects NAME=VALUE, got {s:?}")))?;
        let key = format!("net.{}", name.trim());
        switched
            .set(&key, value.trim())
            .map_err(|m| CliError::Usage(format!("--switch {s}: {m}")))?;
    }
    switched.validate()?;

    let data = dataset(&base)?;
    let mut rows = Vec::new();
    for (label, cfg) in [("baseline", &base), ("switched", &switched)] {
        let (net, report) = train_network(cfg, &data)?;
        let (p, s) = final_metrics(&report).expect("held-out scenes give final metrics");
        writeln!(
            out,
            "{label:<9} params {:>9}  PSNR {p:.4}  SSIM {s:.4}",
            net.num_scalars()
        )?;
        rows.push((net.num_scalars(), p, s));
    }
    let (b, v) = (rows[0], rows[1]);
    writeln!(
        out,
        "delta     params {:>+9}  PSNR {:+.4}  SSIM {:+.4}",
        v.0 as i64 - b.0 as i64,
        v.1 - b.1,
        v.2 - b.2
    )?;
    Ok(())
}

pub fn export_band(a: &ExportBandArgs, out: &mut impl Write) -> CliResult<()> {
    let cube = read_cube(&a.cube)?;
    let (h, w, c) = cube.dims();
    if a.band >= c {
        return Err(CliError::Usage(format!("band {} out of range for {c} bands", a.band)));
    }
    write_atomic(&a.out, &band_pgm(h, w, &cube.band(a.band)))?;
    writeln!(out, "band {} ({h}x{w}) -> {}", a.band, a.out.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_inference() {
        assert_eq!(infer_channels(39, 32, 1, None).unwrap(), 8);
        assert_eq!(infer_channels(46, 32, 2, Some(8)).unwrap(), 8);
        assert_eq!(infer_channels(32, 32, 0, Some(5)).unwrap(), 5);
        assert!(infer_channels(32, 32, 0, None).is_err());
        assert!(infer_channels(39, 32, 2, None).is_err());
        assert!(infer_channels(39, 32, 1, Some(7)).is_err());
    }
}

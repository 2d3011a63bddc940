//! Flat `key = value` run configuration. Keys are namespaced (`net.`,
//! `solver.`, `train.`, `data.`); `#` starts a comment.

use std::collections::HashSet;

use hsi_core::fista::Transform;
use hsi_core::net::{AttentionKind, NetworkConfig};
use hsi_core::train::TrainConfig;
use hsi_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSetting {
    /// `0.9 / L` from power iteration.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub rho: StepSetting,
    pub lambda: f64,
    pub max_iters: usize,
    pub transform: Transform,
    pub tolerance: f64,
    pub accelerated: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rho: StepSetting::Auto,
            lambda: 0.01,
            max_iters: 200,
            transform: Transform::Identity,
            tolerance: 1e-8,
            accelerated: true,
        }
    }
}

/// Synthetic data used by `train` and `ablate`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub height: usize,
    pub width: usize,
    pub dispersion: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub blob_count: usize,
    pub scene_seed: u64,
    pub mask_seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            dispersion: 1,
            train_scenes: 4,
            eval_scenes: 1,
            blob_count: 6,
            scene_seed: 0,
            mask_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub solver: SolverSettings,
    pub train: TrainConfig,
    pub data: DataSettings,
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true/false or on/off, got {v:?}")),
    }
}

fn fmt_bool(b: bool) -> String {
    if b { "true" } else { "false" }.into()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "net.stages",
        "net.channels",
        "net.base_channels",
        "net.window_size",
        "net.pool_factor",
        "net.num_heads",
        "net.ffn_expansion",
        "net.levels",
        "net.use_asp",
        "net.use_isa",
        "net.use_pna",
        "net.use_gla",
        "net.use_pna_transformer",
        "net.attention",
        "net.init_step",
        "net.seed",
        "solver.rho",
        "solver.lambda",
        "solver.max_iters",
        "solver.transform",
        "solver.tolerance",
        "solver.accelerated",
        "train.lr_initial",
        "train.lr_min",
        "train.total_steps",
        "train.batch_size",
        "train.charbonnier_eps",
        "train.seed",
        "train.beta1",
        "train.beta2",
        "train.adam_eps",
        "train.eval_interval",
        "train.noise_sigma",
        "data.height",
        "data.width",
        "data.dispersion",
        "data.train_scenes",
        "data.eval_scenes",
        "data.blob_count",
        "data.scene_seed",
        "data.mask_seed",
    ];

    /// Assigns one key; the error is a message without location.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (n, s, t, d) = (&mut self.net, &mut self.solver, &mut self.train, &mut self.data);
        match key {
            "net.stages" => n.stages = parse_num(v)?,
            "net.channels" => n.channels = parse_num(v)?,
            "net.base_channels" => n.base_channels = parse_num(v)?,
            "net.window_size" => n.window_size = parse_num(v)?,
            "net.pool_factor" => n.pool_factor = parse_num(v)?,
            "net.num_heads" => n.num_heads = parse_num(v)?,
            "net.ffn_expansion" => n.ffn_expansion = parse_num(v)?,
            "net.levels" => n.levels = parse_num(v)?,
            "net.use_asp" => n.use_asp = parse_bool(v)?,
            "net.use_isa" => n.use_isa = parse_bool(v)?,
            "net.use_pna" => n.use_pna = parse_bool(v)?,
            "net.use_gla" => n.use_gla = parse_bool(v)?,
            "net.use_pna_transformer" => n.use_pna_transformer = parse_bool(v)?,
            "net.attention" => {
                n.attention = match v {
                    "pna" => AttentionKind::Pna,
                    "wmsa" => AttentionKind::Wmsa,
                    _ => return Err(format!("attention must be pna or wmsa, got {v:?}")),
                }
            }
            "net.init_step" => n.init_step = parse_num(v)?,
            "net.seed" => n.seed = parse_num(v)?,
            "solver.rho" => {
                s.rho = if v == "auto" {
                    StepSetting::Auto
                } else {
                    StepSetting::Fixed(parse_num(v)?)
                }
            }
            "solver.lambda" => s.lambda = parse_num(v)?,
            "solver.max_iters" => s.max_iters = parse_num(v)?,
            "solver.transform" => {
                s.transform = match v {
                    "identity" => Transform::Identity,
                    "dct" => Transform::Dct,
                    _ => return Err(format!("transform must be identity or dct, got {v:?}")),
                }
            }
            "solver.tolerance" => s.tolerance = parse_num(v)?,
            "solver.accelerated" => s.accelerated = parse_bool(v)?,
            "train.lr_initial" => t.lr_initial = parse_num(v)?,
            "train.lr_min" => t.lr_min = parse_num(v)?,
            "train.total_steps" => t.total_steps = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.charbonnier_eps" => t.charbonnier_eps = parse_num(v)?,
            "train.seed" => t.seed = parse_num(v)?,
            "train.beta1" => t.beta1 = parse_num(v)?,
            "train.beta2" => t.beta2 = parse_num(v)?,
            "train.adam_eps" => t.adam_eps = parse_num(v)?,
            "train.eval_interval" => t.eval_interval = parse_num(v)?,
            "train.noise_sigma" => t.noise_sigma = parse_num(v)?,
            "data.height" => d.height = parse_num(v)?,
            "data.width" => d.width = parse_num(v)?,
            "data.dispersion" => d.dispersion = parse_num(v)?,
            "data.train_scenes" => d.train_scenes = parse_num(v)?,
            "data.eval_scenes" => d.eval_scenes = parse_num(v)?,
            "data.blob_count" => d.blob_count = parse_num(v)?,
            "data.scene_seed" => d.scene_seed = parse_num(v)?,
            "data.mask_seed" => d.mask_seed = parse_num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (n, s, t, d) = (&self.net, &self.solver, &self.train, &self.data);
        Some(match key {
            "net.stages" => n.stages.to_string(),
            "net.channels" => n.channels.to_string(),
            "net.base_channels" => n.base_channels.to_string(),
            "net.window_size" => n.window_size.to_string(),
            "net.pool_factor" => n.pool_factor.to_string(),
            "net.num_heads" => n.num_heads.to_string(),
            "net.ffn_expansion" => n.ffn_expansion.to_string(),
            "net.levels" => n.levels.to_string(),
            "net.use_asp" => fmt_bool(n.use_asp),
            "net.use_isa" => fmt_bool(n.use_isa),
            "net.use_pna" => fmt_bool(n.use_pna),
            "net.use_gla" => fmt_bool(n.use_gla),
            "net.use_pna_transformer" => fmt_bool(n.use_pna_transformer),
            "net.attention" => match n.attention {
                AttentionKind::Pna => "pna".into(),
                AttentionKind::Wmsa => "wmsa".into(),
            },
            "net.init_step" => n.init_step.to_string(),
            "net.seed" => n.seed.to_string(),
            "solver.rho" => match s.rho {
                StepSetting::Auto => "auto".into(),
                StepSetting::Fixed(r) => r.to_string(),
            },
            "solver.lambda" => s.lambda.to_string(),
            "solver.max_iters" => s.max_iters.to_string(),
            "solver.transform" => match s.transform {
                Transform::Identity => "identity".into(),
                Transform::Dct => "dct".into(),
            },
            "solver.tolerance" => s.tolerance.to_string(),
            "solver.accelerated" => fmt_bool(s.accelerated),
            "train.lr_initial" => t.lr_initial.to_string(),
            "train.lr_min" => t.lr_min.to_string(),
            "train.total_steps" => t.total_steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.charbonnier_eps" => t.charbonnier_eps.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.eval_interval" => t.eval_interval.to_string(),
            "train.noise_sigma" => t.noise_sigma.to_string(),
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.dispersion" => d.dispersion.to_string(),
            "data.train_scenes" => d.train_scenes.to_string(),
            "data.eval_scenes" => d.eval_scenes.to_string(),
            "data.blob_count" => d.blob_count.to_string(),
            "data.scene_seed" => d.scene_seed.to_string(),
            "data.mask_seed" => d.mask_seed.to_string(),
            _ => return None,
        })
    }

    /// Parses a whole file. Keys may appear at most once; omitted keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && Self::KEYS.contains(&key) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.net.check_extents(self.data.height, self.data.width)?;
        let s = &self.solver;
        if let StepSetting::Fixed(r) = s.rho {
            if !(r > 0.0) {
                return Err(Error::Invalid(format!("solver.rho must be > 0, got {r}")));
            }
        }
        if !(s.lambda >= 0.0) || s.max_iters == 0 || !(s.tolerance >= 0.0) {
            return Err(Error::Invalid(
                "solver needs lambda >= 0, max_iters >= 1, tolerance >= 0".into(),
            ));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Invalid("data.train_scenes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(&format!(
                "{key} = {}\n",
                self.get(key).expect("every listed key is readable")
            ));
        }
        out
    }
}

//! Three-level U-shaped prior network built from NHAT blocks with
//! inter-stage channel gating.

use hsi_autodiff::{Graph, Var};

use super::blocks::{GatedFfn, Gla, Isa, Nhat, Nlha, Pna};
use super::config::NetworkConfig;
use super::layers::{Builder, Conv, LayerNorm, Linear, Upsample};
use crate::error::{shape, Result};

pub fn build_nhat(b: &mut Builder, name: &str, channels: usize, cfg: &NetworkConfig) -> Nhat {
    let pna = cfg.use_pna.then(|| {
        Pna::new(
            b,
            &format!("{name}.pna"),
            channels,
            cfg.num_heads,
            cfg.window_size,
            cfg.effective_pool(),
            cfg.use_pna_transformer,
        )
    });
    let gla = cfg.use_gla.then(|| Gla::new(b, &format!("{name}.gla"), channels));
    Nhat {
        norm1: LayerNorm::new(b, &format!("{name}.norm1"), channels),
        nlha: Nlha {
            pna,
            gla,
            proj: Linear::new(b, &format!("{name}.nlha_proj"), channels, channels),
        },
        norm2: LayerNorm::new(b, &format!("{name}.norm2"), channels),
        ffn: GatedFfn::new(b, &format!("{name}.ffn"), channels, cfg.ffn_expansion),
    }
}

/// One NHAT block followed by its (optional) ISA gate.
#[derive(Debug, Clone)]
pub struct Level {
    pub block: Nhat,
    pub isa: Option<Isa>,
}

impl Level {
    fn new(b: &mut Builder, name: &str, channels: usize, cfg: &NetworkConfig) -> Self {
        let summary = cfg.level_channels(2);
        Self {
            block: build_nhat(b, &format!("{name}.nhat"), channels, cfg),
            isa: cfg
                .use_isa
                .then(|| Isa::new(b, &format!("{name}.isa"), summary, channels)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, summary: Option<Var>) -> Result<Var> {
        let y = self.block.forward(g, p, x)?;
        match &self.isa {
            Some(isa) => isa.forward(g, p, y, summary),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Nlia {
    pub embed: Conv,
    pub enc1: Level,
    pub down1: Conv,
    pub enc2: Level,
    pub down2: Conv,
    pub bottleneck: Level,
    pub up1: Upsample,
    pub fuse1: Linear,
    pub dec1: Level,
    pub up2: Upsample,
    pub fuse2: Linear,
    pub dec2: Level,
    /// Zero at initialization, so the module starts as the identity on `r`.
    pub output: Conv,
}

impl Nlia {
    pub fn new(b: &mut Builder, name: &str, cfg: &NetworkConfig) -> Self {
        let (c0, c1, c2) = (cfg.level_channels(0), cfg.level_channels(1), cfg.level_channels(2));
        let n = |s: &str| format!("{name}.{s}");
        Self {
            embed: Conv::new(b, &n("embed"), cfg.channels, c0, 3, 1, 1),
            enc1: Level::new(b, &n("enc1"), c0, cfg),
            down1: Conv::new(b, &n("down1"), c0, c1, 4, 2, 1),
            enc2: Level::new(b, &n("enc2"), c1, cfg),
            down2: Conv::new(b, &n("down2"), c1, c2, 4, 2, 1),
            bottleneck: Level::new(b, &n("bottleneck"), c2, cfg),
            up1: Upsample::new(b, &n("up1"), c2, c1),
            fuse1: Linear::new(b, &n("fuse1"), 2 * c1, c1),
            dec1: Level::new(b, &n("dec1"), c1, cfg),
            up2: Upsample::new(b, &n("up2"), c1, c0),
            fuse2: Linear::new(b, &n("fuse2"), 2 * c0, c0),
            dec2: Level::new(b, &n("dec2"), c0, cfg),
            output: Conv::zeroed(b, &n("output"), c0, cfg.channels, 3, 1),
        }
    }

    /// Returns `r + residual(r)` and the bottleneck features that gate the
    /// next stage.
    pub fn forward(&self, g: &mut Graph, p: &[Var], r: Var, summary: Option<Var>) -> Result<(Var, Var)> {
        if g.shape(r).len() != 3 {
            return Err(shape(format!("nlia expects [H, W, C], got {:?}", g.shape(r))));
        }
        let f0 = self.embed.forward(g, p, r)?;
        let e1 = self.enc1.forward(g, p, f0, summary)?;
        let d1 = self.down1.forward(g, p, e1)?;
        let e2 = self.enc2.forward(g, p, d1, summary)?;
        let d2 = self.down2.forward(g, p, e2)?;
        let bn = self.bottleneck.forward(g, p, d2, summary)?;
        let u1 = self.up1.forward(g, p, bn)?;
        let u1 = g.concat(&[u1, e2], 2)?;
        let u1 = self.fuse1.forward(g, p, u1)?;
        let s1 = self.dec1.forward(g, p, u1, summary)?;
        let u2 = self.up2.forward(g, p, s1)?;
        let u2 = g.concat(&[u2, e1], 2)?;
        let u2 = self.fuse2.forward(g, p, u2)?;
        let s2 = self.dec2.forward(g, p, u2, summary)?;
        let res = self.output.forward(g, p, s2)?;
        Ok((g.add(r, res)?, bn))
    }
}

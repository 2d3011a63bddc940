use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Keys and values from average-pooled windows.
    Pna,
    /// Plain window self-attention (pool factor forced to 1).
    Wmsa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stages: usize,
    /// Spectral bands of the reconstructed cube.
    pub channels: usize,
    pub base_channels: usize,
    pub window_size: usize,
    pub pool_factor: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    /// Depth of the U-shape; only 3 (two encoders and a bottleneck) is built.
    pub levels: usize,
    pub use_asp: bool,
    pub use_isa: bool,
    pub use_pna: bool,
    pub use_gla: bool,
    /// With this off the PNA branch keeps only its value and output maps.
    pub use_pna_transformer: bool,
    pub attention: AttentionKind,
    /// Step size the step-size head emits at initialization.
    pub init_step: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            channels: 8,
            base_channels: 16,
            window_size: 4,
            pool_factor: 2,
            num_heads: 2,
            ffn_expansion: 2,
            levels: 3,
            use_asp: true,
            use_isa: true,
            use_pna: true,
            use_gla: true,
            use_pna_transformer: true,
            attention: AttentionKind::Pna,
            init_step: 0.125,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn effective_pool(&self) -> usize {
        match self.attention {
            AttentionKind::Pna => self.pool_factor,
            AttentionKind::Wmsa => 1,
        }
    }

    /// Channel width at U-shape level `l` (0 is full resolution).
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.levels != 3 {
            return bad(format!("levels must be 3, got {}", self.levels));
        }
        if self.num_heads == 0 || !self.base_channels.is_multiple_of(self.num_heads) {
            return bad(format!(
                "base_channels {} not divisible by num_heads {}",
                self.base_channels, self.num_heads
            ));
        }
        if self.window_size == 0 || self.ffn_expansion == 0 {
            return bad("window_size and ffn_expansion must be positive".into());
        }
        let p = self.effective_pool();
        if p == 0 || !self.window_size.is_multiple_of(p) {
            return bad(format!(
                "pool factor {p} does not divide window size {}",
                self.window_size
            ));
        }
        if !self.use_pna && !self.use_gla {
            return bad("at least one of the PNA and GLA branches must be enabled".into());
        }
        if !(self.init_step > 0.0 && self.init_step.is_finite()) {
            return bad(format!("init_step must be > 0, got {}", self.init_step));
        }
        Ok(())
    }

    /// Spatial extents must survive two halvings and tile into windows.
    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let unit = self.window_size << (self.levels - 1);
        if height == 0 || width == 0 || !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(Error::Shape(format!(
                "spatial extents {height}x{width} must be positive multiples of {unit}"
            )));
        }
        Ok(())
    }
}

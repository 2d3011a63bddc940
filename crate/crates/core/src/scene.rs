//! Synthetic hyperspectral scenes: Gaussian blobs with smooth spectra.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cassi::SpectralCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blob_count: usize,
    /// Width of the spectral bumps as a fraction of the band count; larger
    /// values give smoother signatures.
    pub spectral_smoothness: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            channels,
            blob_count: 6,
            spectral_smoothness: 0.35,
            seed,
        }
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SpectralCube> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Invalid("scene extents must be positive".into()));
    }
    if !(spec.spectral_smoothness > 0.0) {
        return Err(Error::Invalid("spectral smoothness must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = vec![0.0; h * w * c];
    let span = h.min(w) as f64;
    for _ in 0..spec.blob_count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let radius = rng.random_range(0.1 * span..0.35 * span);
        let amplitude = rng.random_range(0.3..0.9);
        let peak = rng.random_range(0.0..1.0);
        let spread = spec.spectral_smoothness * rng.random_range(0.6..1.4);
        let floor = rng.random_range(0.0..0.3);
        let signature: Vec<f64> = (0..c)
            .map(|n| {
                let u = if c > 1 { n as f64 / (c - 1) as f64 } else { 0.5 };
                floor + (1.0 - floor) * (-((u - peak).powi(2)) / (2.0 * spread * spread)).exp()
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let s = amplitude * (-r2 / (2.0 * radius * radius)).exp();
                let base = (y * w + x) * c;
                for (n, sig) in signature.iter().enumerate() {
                    data[base + n] += s * sig;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    SpectralCube::new(h, w, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let spec = SceneSpec::new(16, 12, 5, 9);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.data().iter().any(|&v| v > 0.05));
        let other = generate_scene(&SceneSpec::new(16, 12, 5, 10)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn no_blobs_is_zero() {
        let mut spec = SceneSpec::new(4, 4, 3, 1);
        spec.blob_count = 0;
        assert!(generate_scene(&spec).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

//! Coded-aperture snapshot spectral imaging: mask modulation, per-channel
//! dispersion shift and detector integration, plus the exact adjoint.
//!
//! All cubes are stored row-major in `(h, w, c)` order. Channel `n` lands on
//! detector columns `[d*n, d*n + W)`, so the measurement is
//! `H x (W + d*(C-1))` wide.

use std::sync::Arc;

use hsi_autodiff::LinearOperator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape, Error, Result};

/// Default band edges in nanometres.
pub const DEFAULT_BAND_NM: (f64, f64) = (450.0, 650.0);

/// Evenly spaced wavelengths across [`DEFAULT_BAND_NM`].
pub fn default_wavelengths(channels: usize) -> Vec<f64> {
    let (lo, hi) = DEFAULT_BAND_NM;
    if channels == 1 {
        return vec![lo];
    }
    (0..channels)
        .map(|n| lo + (hi - lo) * n as f64 / (channels - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    channels: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_wavelengths(height, width, default_wavelengths(channels), data)
    }

    pub fn with_wavelengths(height: usize, width: usize, wavelengths: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        let channels = wavelengths.len();
        if channels == 0 {
            return Err(Error::Invalid("a cube needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "{height}x{width}x{channels} cube needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if wavelengths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Invalid("wavelengths must be strictly increasing".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cube contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            wavelengths,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            wavelengths: default_wavelengths(channels),
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// One band as an `H x W` row-major image.
    pub fn band(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Same geometry and wavelengths, new values.
    pub(crate) fn like(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            data,
            wavelengths: self.wavelengths.clone(),
            ..*self
        }
    }

    pub(crate) fn sized(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        Self {
            height,
            width,
            channels,
            wavelengths: default_wavelengths(channels),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CodedMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    /// Bernoulli(1/2) binary mask.
    pub fn random_binary(height: usize, width: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..height * width)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Integer dispersion: channel `n` is displaced by `step * n` columns.
///
/// `reference_channel` labels the channel whose physical shift is zero (the
/// centre wavelength). Shifts relative to it are `step * (n - reference)`;
/// the detector frame is anchored at channel 0 so stored offsets never go
/// negative, which differs from the physical frame by a constant translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispersionSpec {
    pub step: usize,
    pub reference_channel: usize,
}

impl Default for DispersionSpec {
    fn default() -> Self {
        Self {
            step: 1,
            reference_channel: 0,
        }
    }
}

impl DispersionSpec {
    pub fn new(step: usize) -> Self {
        Self {
            step,
            reference_channel: 0,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reference_channel >= channels {
            return Err(Error::Invalid(format!(
                "reference channel {} out of range for {channels} channels",
                self.reference_channel
            )));
        }
        Ok(())
    }

    /// Detector column offset of channel `n`.
    pub fn offset(&self, n: usize) -> usize {
        self.step * n
    }

    /// Physical shift of channel `n` relative to the reference channel.
    pub fn relative_shift(&self, n: usize) -> i64 {
        self.step as i64 * (n as i64 - self.reference_channel as i64)
    }

    pub fn measurement_width(&self, width: usize, channels: usize) -> usize {
        width + self.step * (channels - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape(format!(
                "{height}x{width} measurement needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn check_mask(cube: &SpectralCube, mask: &CodedMask) -> Result<()> {
    if (mask.height, mask.width) != (cube.height, cube.width) {
        return Err(shape(format!(
            "mask is {}x{}, cube is {}x{}",
            mask.height, mask.width, cube.height, cube.width
        )));
    }
    Ok(())
}

fn check_measurement(
    meas: &Measurement,
    height: usize,
    width: usize,
    channels: usize,
    spec: &DispersionSpec,
) -> Result<()> {
    let wm = spec.measurement_width(width, channels);
    if meas.height != height || meas.width != wm {
        return Err(shape(format!(
            "measurement is {}x{}, expected {height}x{wm} for W={width}, C={channels}, d={}",
            meas.height, meas.width, spec.step
        )));
    }
    Ok(())
}

pub fn modulate(cube: &SpectralCube, mask: &CodedMask) -> Result<SpectralCube> {
    check_mask(cube, mask)?;
    let c = cube.channels;
    let data = cube
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v * mask.values[i / c])
        .collect();
    Ok(cube.like(data))
}

/// Width-extended cube with channel `n` placed at column offset `d*n`.
pub fn disperse(cube: &SpectralCube, spec: &DispersionSpec) -> Result<SpectralCube> {
    spec.validate(cube.channels)?;
    let (h, w, c) = cube.dims();
    let wm = spec.measurement_width(w, c);
    let mut out = vec![0.0; h * wm * c];
    for y in 0..h {
        for x in 0..w {
            for n in 0..c {
                out[(y * wm + x + spec.offset(n)) * c + n] = cube.data[(y * w + x) * c + n];
            }
        }
    }
    Ok(SpectralCube {
        height: h,
        width: wm,
        channels: c,
        wavelengths: cube.wavelengths.clone(),
        data: out,
    })
}

/// Sums the channels of a (dispersed) cube onto the detector.
pub fn integrate(shifted: &SpectralCube) -> Measurement {
    let c = shifted.channels;
    let data = shifted.data.chunks(c).map(|px| px.iter().sum()).collect();
    Measurement {
        height: shifted.height,
        width: shifted.width,
        data,
    }
}

/// `Phi x` on raw `(h, w, c)` data.
pub fn forward_raw(x: &[f64], mask: &[f64], h: usize, w: usize, c: usize, d: usize) -> Vec<f64> {
    let wm = w + d * (c - 1);
    let mut out = vec![0.0; h * wm];
    for y in 0..h {
        for xx in 0..w {
            let m = mask[y * w + xx];
            let px = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
            for (n, v) in px.iter().enumerate() {
                out[y * wm + xx + d * n] += v * m;
            }
        }
    }
    out
}

/// `Phi^T y` on raw data.
pub fn adjoint_raw(meas: &[f64], mask: &[f64], h: usize, w: usize, c: usize, d: usize) -> Vec<f64> {
    let wm = w + d * (c - 1);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let m = mask[y * w + xx];
            for n in 0..c {
                out[(y * w + xx) * c + n] = meas[y * wm + xx + d * n] * m;
            }
        }
    }
    out
}

pub fn shift_back_raw(meas: &[f64], h: usize, w: usize, c: usize, d: usize) -> Vec<f64> {
    let wm = w + d * (c - 1);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for n in 0..c {
                out[(y * w + xx) * c + n] = meas[y * wm + xx + d * n];
            }
        }
    }
    out
}

/// `integrate(disperse(modulate(cube, mask), spec))`, fused.
pub fn forward(cube: &SpectralCube, mask: &CodedMask, spec: &DispersionSpec) -> Result<Measurement> {
    check_mask(cube, mask)?;
    spec.validate(cube.channels)?;
    let (h, w, c) = cube.dims();
    let data = forward_raw(&cube.data, &mask.values, h, w, c, spec.step);
    Ok(Measurement {
        height: h,
        width: spec.measurement_width(w, c),
        data,
    })
}

/// Exact adjoint of [`forward`]: crop each channel's window back out of the
/// measurement, then re-apply the mask.
pub fn adjoint(meas: &Measurement, mask: &CodedMask, spec: &DispersionSpec, channels: usize) -> Result<SpectralCube> {
    if channels == 0 {
        return Err(Error::Invalid("channels must be positive".into()));
    }
    spec.validate(channels)?;
    let (h, w) = (mask.height, mask.width);
    check_measurement(meas, h, w, channels, spec)?;
    let data = adjoint_raw(&meas.data, &mask.values, h, w, channels, spec.step);
    Ok(SpectralCube::sized(h, w, channels, data))
}

/// Replicates the measurement into `channels` bands, undoing each band's
/// dispersion offset by cropping `[d*n, d*n + W)`.
pub fn shift_back(meas: &Measurement, spec: &DispersionSpec, channels: usize, width: usize) -> Result<SpectralCube> {
    if channels == 0 {
        return Err(Error::Invalid("channels must be positive".into()));
    }
    spec.validate(channels)?;
    check_measurement(meas, meas.height, width, channels, spec)?;
    let data = shift_back_raw(&meas.data, meas.height, width, channels, spec.step);
    Ok(SpectralCube::sized(meas.height, width, channels, data))
}

/// `forward(cube) + N(0, noise_sigma^2)` per detector pixel, seeded.
pub fn simulate(
    cube: &SpectralCube,
    mask: &CodedMask,
    spec: &DispersionSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<Measurement> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut meas = forward(cube, mask, spec)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        meas.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(meas)
}

/// The sensing matrix as a graph-embeddable linear map from `[H, W, C]` to
/// `[H, W + d(C-1)]`.
#[derive(Debug, Clone)]
pub struct CassiOperator {
    height: usize,
    width: usize,
    channels: usize,
    step: usize,
    mask: Arc<[f64]>,
}

impl CassiOperator {
    pub fn new(mask: &CodedMask, spec: &DispersionSpec, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Invalid("channels must be positive".into()));
        }
        spec.validate(channels)?;
        Ok(Self {
            height: mask.height,
            width: mask.width,
            channels,
            step: spec.step,
            mask: mask.values.clone().into(),
        })
    }

    pub fn measurement_width(&self) -> usize {
        self.width + self.step * (self.channels - 1)
    }
}

impl LinearOperator for CassiOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.height, self.measurement_width()]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        forward_raw(x, &self.mask, self.height, self.width, self.channels, self.step)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        adjoint_raw(y, &self.mask, self.height, self.width, self.channels, self.step)
    }
}

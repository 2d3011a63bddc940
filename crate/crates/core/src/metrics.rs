//! Image quality metrics over spectral cubes.

use crate::cassi::SpectralCube;
use crate::error::{shape, Result};

fn same_dims(a: &SpectralCube, b: &SpectralCube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape(format!("cube dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(pred: &SpectralCube, gt: &SpectralCube) -> Result<f64> {
    same_dims(pred, gt)?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`; `+inf` when the inputs are identical.
pub fn psnr(pred: &SpectralCube, gt: &SpectralCube, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM over valid window positions, averaged over bands. The window
/// shrinks to the largest odd size that fits images smaller than 11 pixels.
pub fn ssim(pred: &SpectralCube, gt: &SpectralCube) -> Result<f64> {
    same_dims(pred, gt)?;
    let (h, w, c) = pred.dims();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for band in 0..c {
        let a = pred.band(band);
        let b = gt.band(band);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, _, _) = filter_valid(&a, h, w, &k);
        let (mu_b, _, _) = filter_valid(&b, h, w, &k);
        let (aa, _, _) = filter_valid(&prod(&a, &a), h, w, &k);
        let (bb, _, _) = filter_valid(&prod(&b, &b), h, w, &k);
        let (ab, ho, wo) = filter_valid(&prod(&a, &b), h, w, &k);
        let mut sum = 0.0;
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (ho * wo) as f64;
    }
    Ok(total / c as f64)
}

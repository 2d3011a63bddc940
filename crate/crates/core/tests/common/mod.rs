//! Oracles shared by several test targets.

use hsi_autodiff::{ParamStore, Tensor};
use hsi_core::net::blocks::Pna;
use hsi_core::net::layers::Linear;

/// Independent window attention: loops over windows, heads, queries and keys.
pub fn brute_force_pna(pna: &Pna, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (b, pool, heads) = (pna.window, pna.pool, pna.heads);
    let dh = c / heads;
    let at = |y: usize, xx: usize, ch: usize| x.data()[(y * w + xx) * c + ch];
    let affine = |lin: &Linear, v: &[f64]| -> Vec<f64> {
        let wt = store.get(lin.weight).data();
        (0..c)
            .map(|o| {
                let bias = lin.bias.map(|id| store.get(id).data()[o]).unwrap_or(0.0);
                bias + (0..c).map(|i| v[i] * wt[i * c + o]).sum::<f64>()
            })
            .collect()
    };
    let mut mixed = vec![0.0; h * w * c];
    for wy in 0..h / b {
        for wx in 0..w / b {
            let mut keys = Vec::new();
            let mut vals = Vec::new();
            for ky in 0..b / pool {
                for kx in 0..b / pool {
                    let mut avg = vec![0.0; c];
                    for dy in 0..pool {
                        for dx in 0..pool {
                            for (ch, a) in avg.iter_mut().enumerate() {
                                *a += at(wy * b + ky * pool + dy, wx * b + kx * pool + dx, ch) / (pool * pool) as f64;
                            }
                        }
                    }
                    keys.push(affine(pna.key.as_ref().unwrap(), &avg));
                    vals.push(affine(&pna.value, &avg));
                }
            }
            for qy in 0..b {
                for qx in 0..b {
                    let (y, xx) = (wy * b + qy, wx * b + qx);
                    let tok: Vec<f64> = (0..c).map(|ch| at(y, xx, ch)).collect();
                    let q = affine(pna.query.as_ref().unwrap(), &tok);
                    for hd in 0..heads {
                        let r = hd * dh..(hd + 1) * dh;
                        let scores: Vec<f64> = keys
                            .iter()
                            .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for i in r.clone() {
                            mixed[(y * w + xx) * c + i] = e.iter().zip(&vals).map(|(a, v)| a / z * v[i]).sum();
                        }
                    }
                }
            }
        }
    }
    mixed.chunks(c).flat_map(|t| affine(&pna.proj, t)).collect()
}

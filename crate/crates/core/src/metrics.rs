//! Fidelity of accelerated outputs against full-trajectory references.

use serde::{Deserialize, Serialize};

use crate::backends::Stream;
use crate::error::{Error, Result};
use crate::tensor::{Latent, NoisePred};
use crate::trace::Trace;

/// Reported PSNR for identical inputs, and the ceiling for all others.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Parameter("mse of empty tensors".into()));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// Dynamic range `max − min` of a reference latent (1 for a constant field).
pub fn default_peak(reference: &Latent) -> f64 {
    let (lo, hi) = reference
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range > 0.0 && range.is_finite() {
        range
    } else {
        1.0
    }
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Parameter(format!("peak {peak} must be positive")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM over the last two dimensions, averaged over any leading planes.
pub fn ssim(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(Error::Parameter("ssim needs at least two dimensions".into()));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "ssim needs sides >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Parameter(format!("peak {peak} must be positive")));
    }
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let k = gaussian_kernel();
    let plane_len = h * w;
    let planes = a.len() / plane_len;

    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let pa = &a.data()[p * plane_len..(p + 1) * plane_len];
        let pb = &b.data()[p * plane_len..(p + 1) * plane_len];
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&prod(pa, pa), h, w, &k);
        let e_bb = filter_valid(&prod(pb, pb), h, w, &k);
        let e_ab = filter_valid(&prod(pa, pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-step relative L2 error of cached noise predictions, keyed by `t` (descending).
pub fn eps_divergence(full: &Trace, cached: &Trace) -> Result<Vec<(usize, Option<f64>)>> {
    eps_divergence_stream(full, cached, Stream::Guided)
}

pub fn eps_divergence_stream(full: &Trace, cached: &Trace, stream: Stream) -> Result<Vec<(usize, Option<f64>)>> {
    if full.meta.steps != cached.meta.steps {
        return Err(Error::Metadata(format!(
            "traces cover different T: {} vs {}",
            full.meta.steps, cached.meta.steps
        )));
    }
    if full.meta.shape != cached.meta.shape {
        return Err(Error::Shape {
            left: full.meta.shape.clone(),
            right: cached.meta.shape.clone(),
        });
    }
    let shape = full.meta.shape.clone();
    (1..=full.meta.steps)
        .rev()
        .map(|t| {
            let pair = full.record(t, stream).zip(cached.record(t, stream));
            let err = match pair {
                Some((f, c)) => {
                    let f = NoisePred::from_f32(shape.clone(), &f.eps)?;
                    let c = NoisePred::from_f32(shape.clone(), &c.eps)?;
                    let denom = f.norm_l2();
                    let num = f.sub(&c)?.norm_l2();
                    Some(if denom > 0.0 {
                        num / denom
                    } else if num == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    })
                }
                None => None,
            };
            Ok((t as usize, err))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub peak: f64,
    /// Absent when the latent is too small for the SSIM window.
    pub ssim: Option<f64>,
    /// Relative ε error at each skipped step.
    pub eps_err: Vec<f64>,
}

impl MetricReport {
    pub fn compare(reference: &Latent, candidate: &Latent, peak: Option<f64>) -> Result<Self> {
        let peak = peak.unwrap_or_else(|| default_peak(reference));
        let mse = mse(reference, candidate)?;
        let ssim = match ssim(reference, candidate, peak) {
            Ok(v) => Some(v),
            Err(Error::Parameter(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mse,
            psnr_db: psnr_from_mse(mse, peak),
            peak,
            ssim,
            eps_err: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::initial_noise;

    fn field(seed: u64) -> Latent {
        initial_noise(&[2, 16, 16], seed)
    }

    #[test]
    fn psnr_examples() {
        let a = field(1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let b = field(2);
        let m: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        let expect = 10.0 * (4.0 / m).log10();
        assert!((psnr(&a, &b, 2.0).unwrap() - expect).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = field(3);
        let noise = field(4);
        let mut last = f64::INFINITY;
        for k in [1e-4, 1e-3, 1e-2, 0.1, 1.0] {
            let b = a.zip_map(&noise, |x, n| x + k * n).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = field(5);
        assert_eq!(ssim(&a, &a, 2.0).unwrap(), 1.0);
        let b = field(6);
        assert_eq!(ssim(&a, &b, 2.0).unwrap(), ssim(&b, &a, 2.0).unwrap());
        // checkerboard: locally zero-mean, so only the structure term flips sign
        let checker: Vec<f64> = (0..256)
            .map(|i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let c = Latent::new(vec![16, 16], checker).unwrap();
        assert!(ssim(&c, &c.scale(-1.0), 2.0).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_fields_match_closed_form() {
        let (ma, mb, peak) = (0.7, 0.2, 1.0);
        let a = Latent::new(vec![12, 13], vec![ma; 156]).unwrap();
        let b = Latent::new(vec![12, 13], vec![mb; 156]).unwrap();
        let c1 = (0.01f64 * peak).powi(2);
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b, peak).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_fields() {
        let a = Latent::zeros(vec![10, 10]);
        assert!(matches!(ssim(&a, &a, 1.0), Err(Error::Parameter(_))));
        let flat = Latent::zeros(vec![200]);
        assert!(ssim(&flat, &flat, 1.0).is_err());
    }
}

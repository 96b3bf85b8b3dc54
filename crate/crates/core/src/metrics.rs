//! PSNR and SSIM on float images.

use serde::{Deserialize, Serialize};

use crate::img::Image;
use crate::{Error, Result};

/// PSNR is capped here so identical images compare finitely.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)` over all channels; 99 dB cap when MSE is zero.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument(format!(
            "psnr dims {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.data.len() as f64;
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Rec. 601 luminance.
fn luma(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let r = SSIM_WINDOW - 1;
    let wo = w - r;
    let ho = h - r;
    // horizontal
    let mut tmp = vec![0.0; wo * h];
    for v in 0..h {
        for u in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[v * w + u + i];
            }
            tmp[v * wo + u] = acc;
        }
    }
    // vertical
    let mut out = vec![0.0; wo * ho];
    for v in 0..ho {
        for u in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(v + i) * wo + u];
            }
            out[v * wo + u] = acc;
        }
    }
    (out, wo, ho)
}

/// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5) on luminance,
/// standard constants. Symmetric in its arguments; 1.0 for identical
/// images. Rejects images smaller than the window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument(format!(
            "ssim dims {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let ya = luma(a);
    let yb = luma(b);
    let k = gaussian_kernel();

    let aa: Vec<f64> = ya.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = yb.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = ya.iter().zip(&yb).map(|(x, y)| x * y).collect();

    let (mu_a, wo, ho) = filter_valid(&ya, w, h, &k);
    let (mu_b, _, _) = filter_valid(&yb, w, h, &k);
    let (m_aa, _, _) = filter_valid(&aa, w, h, &k);
    let (m_bb, _, _) = filter_valid(&bb, w, h, &k);
    let (m_ab, _, _) = filter_valid(&ab, w, h, &k);

    let mut total = 0.0;
    for i in 0..wo * ho {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        total += s;
    }
    Ok(total / (wo * ho) as f64)
}

/// One evaluation record: per-image and aggregate quality for a scene
/// rendered in one mode at one scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scene_id: String,
    /// "base" or "sr".
    pub mode: String,
    pub scale: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image_psnr: Vec<f64>,
    pub per_image_ssim: Vec<f64>,
    pub runtime_seconds: f64,
}

impl MetricsRecord {
    pub fn from_pairs(
        scene_id: &str,
        mode: &str,
        scale: f64,
        pairs: &[(Image, Image)],
        runtime_seconds: f64,
    ) -> Result<MetricsRecord> {
        let mut per_psnr = Vec::with_capacity(pairs.len());
        let mut per_ssim = Vec::with_capacity(pairs.len());
        for (render, gt) in pairs {
            per_psnr.push(psnr(render, gt)?);
            per_ssim.push(ssim(render, gt)?);
        }
        let n = pairs.len().max(1) as f64;
        Ok(MetricsRecord {
            scene_id: scene_id.to_string(),
            mode: mode.to_string(),
            scale,
            psnr_db: per_psnr.iter().sum::<f64>() / n,
            ssim: per_ssim.iter().sum::<f64>() / n,
            per_image_psnr: per_psnr,
            per_image_ssim: per_ssim,
            runtime_seconds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::rng_from_seed;
    use rand::Rng;

    #[test]
    fn psnr_identical_hits_cap() {
        let img = Image::filled(16, 16, [0.3, 0.6, 0.9]);
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
    }

    #[test]
    fn psnr_black_vs_white_is_zero() {
        let black = Image::filled(8, 8, [0.0; 3]);
        let white = Image::filled(8, 8, [1.0; 3]);
        assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_direct_formula_on_noise() {
        let mut rng = rng_from_seed(99);
        let a = Image::from_data(
            12,
            9,
            (0..12 * 9 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let b = Image::from_data(
            12,
            9,
            (0..12 * 9 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mse: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / (12.0 * 9.0 * 3.0);
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_dim_mismatch() {
        let a = Image::new(4, 4);
        let b = Image::new(5, 4);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = rng_from_seed(5);
        let img = Image::from_data(
            16,
            16,
            (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = rng_from_seed(6);
        let a = Image::from_data(
            14,
            13,
            (0..14 * 13 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let b = Image::from_data(
            14,
            13,
            (0..14 * 13 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    /// Straightforward direct-window reference implementation as the oracle.
    #[test]
    fn ssim_matches_naive_reference() {
        let a = Image::filled(13, 13, [0.4, 0.4, 0.4]);
        let b = Image::filled(13, 13, [0.5, 0.5, 0.5]);
        let got = ssim(&a, &b).unwrap();

        // naive: constant images -> variance 0, covariance 0, mu diff 0.1
        let (ma, mb) = (0.4, 0.5);
        let expect = (2.0 * ma * mb + SSIM_C1) * SSIM_C2
            / ((ma * ma + mb * mb + SSIM_C1) * SSIM_C2);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");

        // and a non-constant pair against a direct double-loop evaluation
        let mut rng = rng_from_seed(31);
        let a = Image::from_data(
            13,
            12,
            (0..13 * 12 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut bd = a.data.clone();
        for v in bd.iter_mut() {
            *v = (*v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        let b = Image::from_data(13, 12, bd).unwrap();

        let ya = luma(&a);
        let yb = luma(&b);
        let k = gaussian_kernel();
        let mut naive = 0.0;
        let mut count = 0;
        for v0 in 0..(12 - 10) {
            for u0 in 0..(13 - 10) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dv in 0..11 {
                    for du in 0..11 {
                        let w = k[dv] * k[du];
                        let xa = ya[(v0 + dv) * 13 + u0 + du];
                        let xb = yb[(v0 + dv) * 13 + u0 + du];
                        ma += w * xa;
                        mb += w * xb;
                        saa += w * xa * xa;
                        sbb += w * xb * xb;
                        sab += w * xa * xb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                naive += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        naive /= count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - naive).abs() < 1e-6, "{got} vs {naive}");
    }
}

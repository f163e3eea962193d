//! Image-quality and synchronization metrics.
//!
//! PSNR/SSIM use their standard definitions on [0,1] images (PSNR capped at
//! 100 dB for identical inputs). Identity similarity is the cosine of pooled
//! embedding vectors. Lip-sync quality is a Pearson correlation between a
//! re-encoded lips-vector channel and the driving pose track; constant
//! sequences yield a flagged zero instead of NaN.

use crate::error::{Error, Result};
use crate::tensor::Array;
use serde::{Deserialize, Serialize};

/// Per-clip (or aggregate) evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Peak signal-to-noise ratio in dB, capped at 100.
    pub psnr: f64,
    /// Structural similarity in [0,1].
    pub ssim: f64,
    /// Cosine similarity of identity embeddings in [-1,1].
    pub id_cosine: f64,
    /// Pearson correlation between re-encoded lips poses and the driving
    /// track, in [-1,1].
    pub sync_corr: f64,
    /// True when the sync correlation input was constant (corr forced to 0).
    pub sync_constant: bool,
    /// Fraction of absolute pixel-change mass outside the dilated lips mask.
    pub leakage: f64,
}

fn check_same_shape(a: &Array<f32>, b: &Array<f32>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error, accumulated in f64.
pub fn mse(a: &Array<f32>, b: &Array<f32>) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let n = a.numel().max(1);
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// PSNR in dB for images in [0,1]; identical inputs return the 100 dB cap.
pub fn psnr(a: &Array<f32>, b: &Array<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

/// PSNR from a precomputed MSE (peak value 1), capped at 100 dB.
pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        return 100.0;
    }
    (-10.0 * m.log10()).min(100.0)
}

/// PSNR restricted to the support of a [1, H, W] weight mask, applied to
/// every channel of [C, H, W] images. An empty mask yields the 100 dB cap.
pub fn psnr_masked(a: &Array<f32>, b: &Array<f32>, mask: &Array<f32>) -> Result<f64> {
    check_same_shape(a, b, "psnr_masked")?;
    if a.shape().len() != 3 || mask.shape() != [1, a.shape()[1], a.shape()[2]] {
        return Err(Error::shape(
            "psnr_masked",
            format!("image {:?} vs mask {:?}", a.shape(), mask.shape()),
        ));
    }
    let (c, hw) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let mut sum = 0.0f64;
    let mut weight = 0.0f64;
    for i in 0..hw {
        let w = mask.data()[i] as f64;
        if w == 0.0 {
            continue;
        }
        weight += w;
        for ch in 0..c {
            let d = a.data()[ch * hw + i] as f64 - b.data()[ch * hw + i] as f64;
            sum += w * d * d;
        }
    }
    if weight == 0.0 {
        return Ok(100.0);
    }
    Ok(psnr_from_mse(sum / (weight * c as f64)))
}

/// Gaussian-window SSIM (11×11, sigma 1.5, K1=0.01, K2=0.03, L=1), averaged
/// over channels and window positions.
pub fn ssim(a: &Array<f32>, b: &Array<f32>) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    if a.shape().len() != 3 {
        return Err(Error::shape("ssim", format!("expected [C, H, W], got {:?}", a.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    const WIN: usize = 11;
    if h < WIN || w < WIN {
        return Err(Error::invalid(format!("ssim needs at least {WIN}x{WIN} images, got {h}x{w}")));
    }
    let mut kernel = [0.0f64; WIN];
    let sigma = 1.5f64;
    let mut ksum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - (WIN as f64 - 1.0) / 2.0;
        *k = (-d * d / (2.0 * sigma * sigma)).exp();
        ksum += *k;
    }
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y0 in 0..=(h - WIN) {
            for x0 in 0..=(w - WIN) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        let wgt = kernel[dy] * kernel[dx];
                        let xa = pa[(y0 + dy) * w + x0 + dx] as f64;
                        let xb = pb[(y0 + dy) * w + x0 + dx] as f64;
                        ma += wgt * xa;
                        mb += wgt * xb;
                        va += wgt * xa * xa;
                        vb += wgt * xb * xb;
                        cov += wgt * xa * xb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Cosine similarity of two embedding vectors; zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Pearson correlation outcome; constant inputs are flagged and scored 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncCorr {
    pub corr: f64,
    pub constant_input: bool,
}

/// Pearson correlation of two equal-length series after standardization.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<SyncCorr> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson", format!("{} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    if va <= 1e-24 || vb <= 1e-24 {
        return Ok(SyncCorr { corr: 0.0, constant_input: true });
    }
    Ok(SyncCorr { corr: cov / (va.sqrt() * vb.sqrt()), constant_input: false })
}

/// Index of the series channel most |correlated| with the target, over
/// `series[t][c]` rows. Used to calibrate which lips-vector channel tracks
/// mouth openness.
pub fn most_correlated_channel(series: &[Vec<f64>], target: &[f64]) -> Result<usize> {
    if series.is_empty() || series[0].is_empty() {
        return Err(Error::invalid("empty series"));
    }
    let channels = series[0].len();
    let mut best = (0usize, -1.0f64);
    for c in 0..channels {
        let col: Vec<f64> = series.iter().map(|row| row[c]).collect();
        let r = pearson(&col, target)?;
        if r.corr.abs() > best.1 {
            best = (c, r.corr.abs());
        }
    }
    Ok(best.0)
}

/// Binary disk dilation of a [1, H, W] mask by `radius` pixels.
pub fn dilate_mask(mask: &Array<f32>, radius: usize) -> Result<Array<f32>> {
    if mask.shape().len() != 3 || mask.shape()[0] != 1 {
        return Err(Error::shape("dilate_mask", format!("expected [1, H, W], got {:?}", mask.shape())));
    }
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let r = radius as i64;
    let mut out = mask.clone();
    let src = mask.data();
    let dst = out.data_mut();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if src[(y * w as i64 + x) as usize] == 0.0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                        dst[(ny * w as i64 + nx) as usize] = 1.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Absolute-change decomposition of `|a - b|` against a [1, H, W] region
/// mask: (mass inside, mass outside, mean |Δ| outside).
pub fn change_mass(
    a: &Array<f32>,
    b: &Array<f32>,
    mask: &Array<f32>,
) -> Result<(f64, f64, f64)> {
    check_same_shape(a, b, "change_mass")?;
    if a.shape().len() != 3 || mask.shape() != [1, a.shape()[1], a.shape()[2]] {
        return Err(Error::shape(
            "change_mass",
            format!("image {:?} vs mask {:?}", a.shape(), mask.shape()),
        ));
    }
    let (c, hw) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    let mut n_outside = 0usize;
    for i in 0..hw {
        let is_in = mask.data()[i] != 0.0;
        for ch in 0..c {
            let d = (a.data()[ch * hw + i] as f64 - b.data()[ch * hw + i] as f64).abs();
            if is_in {
                inside += d;
            } else {
                outside += d;
            }
        }
        if !is_in {
            n_outside += c;
        }
    }
    let mean_outside = if n_outside == 0 { 0.0 } else { outside / n_outside as f64 };
    Ok((inside, outside, mean_outside))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn identical_images_hit_the_psnr_cap_and_unit_ssim() {
        let mut rng = rng_from_seed(0);
        let a: Array<f32> = Array::rand_uniform(&mut rng, &[3, 16, 16], 0.0, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let a = Array::full(&[3, 16, 16], 0.3f32);
        let b = Array::full(&[3, 16, 16], 0.4f32);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "psnr {p}");
    }

    #[test]
    fn ssim_of_negative_image_is_low() {
        let mut rng = rng_from_seed(3);
        let a: Array<f32> = Array::rand_uniform(&mut rng, &[1, 16, 16], 0.0, 1.0);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array::zeros(&[3, 16, 16]);
        let b = Array::zeros(&[3, 16, 17]);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn masked_psnr_ignores_pixels_outside_the_mask() {
        let a = Array::full(&[3, 16, 16], 0.5f32);
        let mut b = a.clone();
        // Corrupt a pixel outside the mask support.
        b.data_mut()[0] = 1.0;
        let mut mask = Array::zeros(&[1, 16, 16]);
        for i in 100..150 {
            mask.data_mut()[i] = 1.0;
        }
        assert_eq!(psnr_masked(&a, &b, &mask).unwrap(), 100.0);
        // Corrupt inside: finite PSNR.
        b.data_mut()[120] = 1.0;
        assert!(psnr_masked(&a, &b, &mask).unwrap() < 100.0);
    }

    #[test]
    fn pearson_matches_hand_case_and_flags_constants() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [2.0, 4.0, 6.0, 8.0];
        let down = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&a, &up).unwrap().corr - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &down).unwrap().corr + 1.0).abs() < 1e-12);
        let flat = [5.0; 4];
        let r = pearson(&a, &flat).unwrap();
        assert_eq!(r.corr, 0.0);
        assert!(r.constant_input);
    }

    #[test]
    fn reversing_one_series_flips_the_correlation_sign() {
        let a: Vec<f64> = (0..8).map(|t| t as f64).collect();
        let b: Vec<f64> = a.iter().map(|t| 2.0 * t + 1.0).collect();
        assert!((pearson(&a, &b).unwrap().corr - 1.0).abs() < 1e-12);
        let rev_b: Vec<f64> = b.iter().rev().copied().collect();
        assert!((pearson(&a, &rev_b).unwrap().corr + 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_calibration_finds_the_copied_channel() {
        let target: Vec<f64> = (0..20).map(|t| (t as f64 * 0.7).sin()).collect();
        let mut rng = rng_from_seed(5);
        let series: Vec<Vec<f64>> = (0..20)
            .map(|t| {
                let mut row = vec![0.0; 6];
                for (c, v) in row.iter_mut().enumerate() {
                    *v = ((t + c) as f64 * 1.3).cos() * 0.2
                        + rand::Rng::random_range(&mut rng, -0.05..0.05);
                }
                row[3] = target[t] * 2.5 + 0.1;
                row
            })
            .collect();
        assert_eq!(most_correlated_channel(&series, &target).unwrap(), 3);
    }

    #[test]
    fn cosine_handles_equal_orthogonal_and_zero() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn dilation_grows_a_point_into_a_disk() {
        let mut m = Array::zeros(&[1, 9, 9]);
        m.data_mut()[4 * 9 + 4] = 1.0;
        let d = dilate_mask(&m, 2).unwrap();
        let count: f32 = d.data().iter().sum();
        assert_eq!(count, 13.0); // |{(dy,dx): dy^2+dx^2 <= 4}|
        assert_eq!(d.data()[4 * 9 + 4], 1.0);
        assert_eq!(d.data()[2 * 9 + 4], 1.0);
        assert_eq!(d.data()[2 * 9 + 2], 0.0);
    }

    #[test]
    fn change_mass_splits_inside_and_outside() {
        let a = Array::zeros(&[1, 4, 4]);
        let mut b = Array::zeros(&[1, 4, 4]);
        b.data_mut()[0] = 0.5; // outside
        b.data_mut()[5] = 1.0; // inside
        let mut mask = Array::zeros(&[1, 4, 4]);
        mask.data_mut()[5] = 1.0;
        let (inside, outside, mean_out) = change_mass(&b, &a, &mask).unwrap();
        assert!((inside - 1.0).abs() < 1e-12);
        assert!((outside - 0.5).abs() < 1e-12);
        assert!((mean_out - 0.5 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = MetricsReport {
            psnr: 31.25,
            ssim: 0.91,
            id_cosine: 0.97,
            sync_corr: 0.83,
            sync_constant: false,
            leakage: 0.04,
        };
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}

//! Training-time image augmentation: horizontal flip and color jitter.
//!
//! A flip is applied with probability 0.5 and must be mirrored onto the
//! paired masks; the color-jitter bundle (brightness/contrast/hue coefficient
//! 0.4, saturation 3.2) is applied with probability 0.9 and leaves masks
//! untouched. Jitter factors compose in a fixed order
//! (brightness → contrast → saturation → hue) and the result is clamped to
//! [0,1].

use crate::error::{Error, Result};
use crate::tensor::Array;
use rand::Rng;
use serde::{Deserialize, Serialize};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Sampled color-jitter factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Multiplicative brightness in [0.6, 1.4].
    pub brightness: f32,
    /// Contrast about the mean luma, in [0.6, 1.4].
    pub contrast: f32,
    /// Saturation about per-pixel luma, in [0, 4.2].
    pub saturation: f32,
    /// Hue rotation fraction in [-0.4, 0.4] of a full turn.
    pub hue: f32,
}

/// One sampled augmentation decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    pub jitter: Option<Jitter>,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, jitter: None };
}

/// Draw an augmentation: flip w.p. 0.5, jitter bundle w.p. 0.9.
pub fn sample_augment<R: Rng>(rng: &mut R) -> Augment {
    let flip = rng.random::<f32>() < 0.5;
    let jitter = if rng.random::<f32>() < 0.9 {
        Some(Jitter {
            brightness: 1.0 + 0.4 * (rng.random::<f32>() * 2.0 - 1.0),
            contrast: 1.0 + 0.4 * (rng.random::<f32>() * 2.0 - 1.0),
            saturation: (1.0 + 3.2 * (rng.random::<f32>() * 2.0 - 1.0)).max(0.0),
            hue: 0.4 * (rng.random::<f32>() * 2.0 - 1.0),
        })
    } else {
        None
    };
    Augment { flip, jitter }
}

fn check_chw(img: &Array<f32>, op: &'static str, channels: usize) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[0] != channels {
        return Err(Error::shape(op, format!("expected [{channels}, H, W], got {:?}", img.shape())));
    }
    Ok(())
}

fn flip_horizontal(img: &Array<f32>) -> Array<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    let dst = out.data_mut();
    let src = img.data();
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            for x in 0..w {
                dst[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    out
}

/// Apply the augmentation to an RGB image of shape [3, H, W] in [0,1].
pub fn apply_image(aug: &Augment, img: &Array<f32>) -> Result<Array<f32>> {
    check_chw(img, "augment.apply_image", 3)?;
    let mut out = if aug.flip { flip_horizontal(img) } else { img.clone() };
    if let Some(j) = aug.jitter {
        let hw = out.shape()[1] * out.shape()[2];
        // Brightness, then contrast about the (post-brightness) mean luma.
        for v in out.data_mut() {
            *v *= j.brightness;
        }
        let data = out.data();
        let mean_luma = (0..hw)
            .map(|i| {
                (LUMA[0] as f64) * data[i] as f64
                    + (LUMA[1] as f64) * data[hw + i] as f64
                    + (LUMA[2] as f64) * data[2 * hw + i] as f64
            })
            .sum::<f64>() as f32
            / hw as f32;
        let (sh, ch) = (std::f32::consts::TAU * j.hue).sin_cos();
        let data = out.data_mut();
        for i in 0..hw {
            let mut rgb = [data[i], data[hw + i], data[2 * hw + i]];
            for v in rgb.iter_mut() {
                *v = mean_luma + (*v - mean_luma) * j.contrast;
            }
            let luma = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
            for v in rgb.iter_mut() {
                *v = luma + (*v - luma) * j.saturation;
            }
            // Hue: rotate the chroma plane of the YIQ decomposition.
            let y = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
            let iq_i = 0.595716 * rgb[0] - 0.274453 * rgb[1] - 0.321263 * rgb[2];
            let iq_q = 0.211456 * rgb[0] - 0.522591 * rgb[1] + 0.311135 * rgb[2];
            let (ri, rq) = (ch * iq_i - sh * iq_q, sh * iq_i + ch * iq_q);
            rgb[0] = y + 0.9563 * ri + 0.6210 * rq;
            rgb[1] = y - 0.2721 * ri - 0.6474 * rq;
            rgb[2] = y - 1.1070 * ri + 1.7046 * rq;
            data[i] = rgb[0];
            data[hw + i] = rgb[1];
            data[2 * hw + i] = rgb[2];
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Apply the geometric part of the augmentation to a [1, H, W] mask: flips
/// mirror the mask, color jitter leaves it unchanged.
pub fn apply_mask(aug: &Augment, mask: &Array<f32>) -> Result<Array<f32>> {
    check_chw(mask, "augment.apply_mask", 1)?;
    Ok(if aug.flip { flip_horizontal(mask) } else { mask.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn flip_mirrors_columns_and_is_an_involution() {
        let img = Array::from_vec(
            &[3, 1, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let aug = Augment { flip: true, jitter: None };
        let flipped = apply_image(&aug, &img).unwrap();
        assert_eq!(flipped.data()[..3], [1.0, 1.0, 1.0]); // clamped mirror of row [3,2,1]
        // Involution (checked on a unit-range image so the clamp is inert).
        let unit =
            Array::from_vec(&[3, 1, 3], vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.6, 0.3, 0.7, 0.8])
                .unwrap();
        assert_eq!(apply_image(&aug, &apply_image(&aug, &unit).unwrap()).unwrap(), unit);
    }

    #[test]
    fn mask_flips_with_the_image() {
        let mask = Array::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let aug = Augment { flip: true, jitter: None };
        let out = apply_mask(&aug, &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 1.0, 0.0]);
        let no = apply_mask(&Augment::NONE, &mask).unwrap();
        assert_eq!(no, mask);
    }

    #[test]
    fn flip_and_jitter_frequencies_match_their_probabilities() {
        let mut rng = rng_from_seed(1234);
        let n = 100_000;
        let mut flips = 0usize;
        let mut jitters = 0usize;
        for _ in 0..n {
            let a = sample_augment(&mut rng);
            flips += a.flip as usize;
            jitters += a.jitter.is_some() as usize;
            if let Some(j) = a.jitter {
                assert!((0.6..=1.4).contains(&j.brightness));
                assert!((0.6..=1.4).contains(&j.contrast));
                assert!((0.0..=4.2).contains(&j.saturation));
                assert!((-0.4..=0.4).contains(&j.hue));
            }
        }
        let flip_freq = flips as f64 / n as f64;
        let jitter_freq = jitters as f64 / n as f64;
        assert!((0.49..=0.51).contains(&flip_freq), "flip frequency {flip_freq}");
        assert!((0.89..=0.91).contains(&jitter_freq), "jitter frequency {jitter_freq}");
    }

    #[test]
    fn jitter_output_stays_in_unit_range() {
        let mut rng = rng_from_seed(7);
        let img: Array<f32> = Array::rand_uniform(&mut rng, &[3, 8, 8], 0.0, 1.0);
        for _ in 0..200 {
            let aug = sample_augment(&mut rng);
            let out = apply_image(&aug, &img).unwrap();
            for &v in out.data() {
                assert!((0.0..=1.0).contains(&v) && v.is_finite());
            }
        }
    }

    #[test]
    fn neutral_jitter_factors_are_an_identity() {
        let mut rng = rng_from_seed(3);
        let img: Array<f32> = Array::rand_uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
        let aug = Augment {
            flip: false,
            jitter: Some(Jitter { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 }),
        };
        let out = apply_image(&aug, &img).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

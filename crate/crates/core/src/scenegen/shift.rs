use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Photometric corruption turning source renders into target-domain images.
/// Operations run in the order overlay, blur, contrast, gamma, noise, clamp.
/// Each one is skipped when its parameter is at the identity value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Per-channel exponent: `x -> x^g`.
    pub color_gamma: [f64; 3],
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels.
    pub blur_radius: f64,
    /// Contrast gain around the per-channel image mean.
    pub contrast: f64,
    /// Blend weight of a procedural grating texture.
    pub texture_overlay_strength: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            color_gamma: [1.6, 1.0, 0.6],
            noise_sigma: 0.03,
            blur_radius: 1.0,
            contrast: 0.7,
            texture_overlay_strength: 0.25,
            seed: 7,
        }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        ShiftConfig {
            color_gamma: [1.0; 3],
            noise_sigma: 0.0,
            blur_radius: 0.0,
            contrast: 1.0,
            texture_overlay_strength: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        if !self.color_gamma.iter().all(|&g| g.is_finite() && g > 0.0) {
            return Err(Error::config(format!("color_gamma must be positive, got {:?}", self.color_gamma)));
        }
        for (name, v, lo, hi) in [
            ("noise_sigma", self.noise_sigma, 0.0, 0.1),
            ("blur_radius", self.blur_radius, 0.0, 2.0),
            ("contrast", self.contrast, 0.6, 1.4),
            ("texture_overlay_strength", self.texture_overlay_strength, 0.0, 0.5),
        ] {
            if !within(v, lo, hi) {
                return Err(Error::config(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Same configuration with the seed replaced, used to vary noise and
    /// texture per sample.
    pub fn reseeded(&self, seed: u64) -> Self {
        ShiftConfig { seed, ..self.clone() }
    }
}

fn overlay(img: &mut Image<f32>, strength: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0E7A));
    let (h, w) = (img.height, img.width);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.08..0.5);
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let s = strength as f32;
    for y in 0..h {
        for x in 0..w {
            let v: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>();
            let p = (0.5 + v / 6.0) as f32;
            for c in 0..3 {
                let px = &mut img.plane_mut(c)[y * w + x];
                *px = (1.0 - s) * *px + s * p;
            }
        }
    }
}

fn gaussian_blur(img: &mut Image<f32>, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height as isize, img.width as isize);
    let clampi = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    for c in 0..3 {
        let src = img.plane(c).to_vec();
        let mut tmp = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = (-r..=r)
                    .map(|i| kernel[(i + r) as usize] * src[(y * w) as usize + clampi(x + i, w)] as f64)
                    .sum();
                tmp[(y * w + x) as usize] = acc as f32;
            }
        }
        let out = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = (-r..=r)
                    .map(|i| kernel[(i + r) as usize] * tmp[clampi(y + i, h) * w as usize + x as usize] as f64)
                    .sum();
                out[(y * w + x) as usize] = acc as f32;
            }
        }
    }
}

/// Applies the configured photometric shift. Input pixels must lie in [0, 1].
pub fn apply_domain_shift(img: &Image<f32>, cfg: &ShiftConfig) -> Result<Image<f32>> {
    cfg.validate()?;
    if img.data.len() != 3 * img.height * img.width {
        return Err(Error::shape(format!(
            "image buffer holds {} values, expected 3x{}x{}",
            img.data.len(),
            img.height,
            img.width
        )));
    }
    if !img.data.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Numeric("input image has pixels outside [0, 1]".into()));
    }
    let mut out = img.clone();
    if cfg.texture_overlay_strength > 0.0 {
        overlay(&mut out, cfg.texture_overlay_strength, cfg.seed);
    }
    if cfg.blur_radius > 0.0 {
        gaussian_blur(&mut out, cfg.blur_radius);
    }
    if cfg.contrast != 1.0 {
        let k = cfg.contrast as f32;
        for c in 0..3 {
            let plane = out.plane_mut(c);
            let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len().max(1) as f64) as f32;
            plane.iter_mut().for_each(|v| *v = mean + k * (*v - mean));
        }
    }
    for (c, &g) in cfg.color_gamma.iter().enumerate() {
        if g != 1.0 {
            out.plane_mut(c).iter_mut().for_each(|v| *v = v.max(0.0).powf(g as f32));
        }
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x0015E));
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        out.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> Image<f32> {
        let (h, w) = (16, 20);
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = gradient_image();
        assert_eq!(apply_domain_shift(&img, &ShiftConfig::identity()).unwrap(), img);
    }

    #[test]
    fn noise_matches_configured_moments() {
        let img = Image::filled(128, 160, 0.5f32);
        let cfg = ShiftConfig {
            noise_sigma: 0.05,
            seed: 3,
            ..ShiftConfig::identity()
        };
        let out = apply_domain_shift(&img, &cfg).unwrap();
        let diffs: Vec<f64> = out.data.iter().map(|&v| v as f64 - 0.5).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 0.005, "{mean}");
        assert!((std - 0.05).abs() <= 0.01, "{std}");
    }

    #[test]
    fn gamma_acts_per_channel() {
        let img = Image::filled(4, 5, 0.5f32);
        let cfg = ShiftConfig {
            color_gamma: [2.0, 1.0, 1.0],
            ..ShiftConfig::identity()
        };
        let out = apply_domain_shift(&img, &cfg).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 0.25));
        assert!(out.plane(1).iter().chain(out.plane(2)).all(|&v| v == 0.5));
    }

    #[test]
    fn reference_shift_is_clamped_and_deterministic() {
        let img = gradient_image();
        let cfg = ShiftConfig::default();
        let a = apply_domain_shift(&img, &cfg).unwrap();
        assert_eq!(a, apply_domain_shift(&img, &cfg).unwrap());
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(8, 9, 0.3f32);
        let cfg = ShiftConfig {
            blur_radius: 2.0,
            ..ShiftConfig::identity()
        };
        let out = apply_domain_shift(&img, &cfg).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        for cfg in [
            ShiftConfig {
                noise_sigma: 0.2,
                ..ShiftConfig::identity()
            },
            ShiftConfig {
                contrast: 2.0,
                ..ShiftConfig::identity()
            },
            ShiftConfig {
                color_gamma: [0.0, 1.0, 1.0],
                ..ShiftConfig::identity()
            },
        ] {
            assert!(matches!(apply_domain_shift(&gradient_image(), &cfg), Err(Error::Config(_))));
        }
    }
}

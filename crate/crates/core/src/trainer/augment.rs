//! Photometric and geometric augmentation drawn once per quad and applied
//! identically to its four images.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, Rgb, RgbImage};
use imageproc::filter::median_filter;
use imageproc::geometric_transformations::{rotate_about_center, Interpolation};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Additive brightness drawn from `[-brightness, brightness]` (0-255 scale).
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    pub rotate_prob: f64,
    pub max_rotation_deg: f64,
    pub median_prob: f64,
    pub jpeg_prob: f64,
    pub jpeg_quality: (u8, u8),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 10.0,
            contrast: 0.1,
            rotate_prob: 0.3,
            max_rotation_deg: 8.0,
            median_prob: 0.1,
            jpeg_prob: 0.3,
            jpeg_quality: (70, 100),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub rotation_rad: Option<f32>,
    pub median: bool,
    pub jpeg_quality: Option<u8>,
}

impl AugmentParams {
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let brightness = sym(rng, cfg.brightness);
        let contrast = 1.0 + sym(rng, cfg.contrast);
        let rotation_rad = rng
            .gen_bool(cfg.rotate_prob)
            .then(|| sym(rng, cfg.max_rotation_deg).to_radians() as f32);
        let median = rng.gen_bool(cfg.median_prob);
        let jpeg_quality = rng
            .gen_bool(cfg.jpeg_prob)
            .then(|| rng.gen_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1));
        Self {
            brightness,
            contrast,
            rotation_rad,
            median,
            jpeg_quality,
        }
    }

    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        let mut out = img.clone();
        for px in out.pixels_mut() {
            for c in px.0.iter_mut() {
                let v = (f64::from(*c) - 128.0) * self.contrast + 128.0 + self.brightness;
                *c = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        if let Some(theta) = self.rotation_rad {
            out = rotate_about_center(&out, theta, Interpolation::Bilinear, Rgb([0, 0, 0]));
        }
        if self.median {
            out = median_filter(&out, 1, 1);
        }
        if let Some(q) = self.jpeg_quality {
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, q).encode_image(&out)?;
            out = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_rgb8();
        }
        Ok(out)
    }
}

/// Augments the four images of a quad with one shared parameter draw.
pub fn augment_quad(images: &[RgbImage; 4], cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<[RgbImage; 4]> {
    if !cfg.enabled {
        return Ok(images.clone());
    }
    let p = AugmentParams::draw(cfg, rng);
    Ok([p.apply(&images[0])?, p.apply(&images[1])?, p.apply(&images[2])?, p.apply(&images[3])?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_parameters_preserve_alignment() {
        let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, 100]));
        let quad = [img.clone(), img.clone(), img.clone(), img];
        let cfg = AugmentConfig {
            rotate_prob: 1.0,
            median_prob: 1.0,
            jpeg_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_quad(&quad, &cfg, &mut rng).unwrap();
        assert!(out.iter().all(|o| o == &out[0]));
        assert_ne!(out[0], quad[0]);
        assert_eq!(augment_quad(&quad, &AugmentConfig::disabled(), &mut rng).unwrap(), quad);
    }
}

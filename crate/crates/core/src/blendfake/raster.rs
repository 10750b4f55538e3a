//! Float image buffers, blend masks and resampling.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::geometry::{point_in_polygon, Point};

/// RGB image with `f64` samples on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let raw = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer size")
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear sample with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        let x = x.clamp(0.0, maxx);
        let y = y.clamp(0.0, maxy);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x1 = (x0 + 1.0).min(maxx) as u32;
        let y1 = (y0 + 1.0).min(maxy) as u32;
        let (x0, y0) = (x0 as u32, y0 as u32);
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        std::array::from_fn(|c| {
            if fx == 0.0 && fy == 0.0 {
                return p00[c];
            }
            let top = p00[c] + fx * (p10[c] - p00[c]);
            let bot = p01[c] + fx * (p11[c] - p01[c]);
            top + fy * (bot - top)
        })
    }
}

/// Single-channel blend weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    /// Binary rasterization of a polygon; pixel `(x, y)` is sampled at its
    /// integer coordinate.
    pub fn from_polygon(width: u32, height: u32, poly: &[Point]) -> Self {
        let mut m = Self::zeros(width, height);
        let (mut minx, mut miny, mut maxx, mut maxy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in poly {
            minx = minx.min(p[0]);
            miny = miny.min(p[1]);
            maxx = maxx.max(p[0]);
            maxy = maxy.max(p[1]);
        }
        let x0 = minx.floor().max(0.0) as u32;
        let y0 = miny.floor().max(0.0) as u32;
        let x1 = (maxx.ceil() as i64).clamp(0, width as i64 - 1) as u32;
        let y1 = (maxy.ceil() as i64).clamp(0, height as i64 - 1) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if point_in_polygon([x as f64, y as f64], poly) {
                    m.data[(y * width + x) as usize] = 1.0;
                }
            }
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn support_len(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn multiply(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Separable Gaussian blur; `sigma <= 0` is a no-op.
    pub fn gaussian_blur(&self, sigma: f64) -> Mask {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as i64 - radius).clamp(0, w - 1);
                    s += kv * self.data[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = s / ksum;
            }
        }
        let mut out = Mask::zeros(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as i64 - radius).clamp(0, h - 1);
                    s += kv * tmp[(yy * w + x) as usize];
                }
                out.data[(y * w + x) as usize] = (s / ksum).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Per-channel affine colour map `x -> scale·x + shift`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTransfer {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl ColorTransfer {
    /// Matches per-channel mean and standard deviation of `source` to those
    /// of `target`, both measured over the pixels where `region > 0`.
    pub fn match_statistics(source: &FloatImage, target: &FloatImage, region: &Mask) -> Self {
        let s = channel_stats(source, region);
        let t = channel_stats(target, region);
        let mut scale = [1.0; 3];
        let mut shift = [0.0; 3];
        for c in 0..3 {
            let (ms, ss) = s[c];
            let (mt, st) = t[c];
            scale[c] = if ss > 1e-9 { st / ss } else { 1.0 };
            shift[c] = mt - scale[c] * ms;
        }
        Self { scale, shift }
    }

    pub fn apply(&self, px: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| self.scale[c] * px[c] + self.shift[c])
    }
}

fn channel_stats(img: &FloatImage, region: &Mask) -> [(f64, f64); 3] {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0.0;
    for (i, &m) in region.data.iter().enumerate() {
        if m > 0.0 {
            n += 1.0;
            for c in 0..3 {
                let v = img.data[i * 3 + c];
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    if n == 0.0 {
        return [(0.0, 0.0); 3];
    }
    std::array::from_fn(|c| {
        let mean = sum[c] / n;
        (mean, (sq[c] / n - mean * mean).max(0.0).sqrt())
    })
}

/// `out = m·source + (1−m)·base` per pixel; pixels with `m == 0` are copied
/// from `base` untouched.
pub fn composite(base: &RgbImage, source: &FloatImage, mask: &Mask) -> RgbImage {
    let mut out = base.clone();
    for y in 0..base.height() {
        for x in 0..base.width() {
            let m = mask.get(x, y);
            if m == 0.0 {
                continue;
            }
            let b = base.get_pixel(x, y).0;
            let s = source.pixel(x, y);
            let px = std::array::from_fn(|c| {
                (m * s[c] + (1.0 - m) * f64::from(b[c])).round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x, y, image::Rgb(px));
        }
    }
    out
}

//! Unseen-perturbation families used for the regularity analysis.

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationFamily {
    BlockMask,
    GaussianNoise,
    Shift,
}

impl PerturbationFamily {
    pub const ALL: [PerturbationFamily; 3] = [Self::BlockMask, Self::GaussianNoise, Self::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Self::BlockMask => "block_mask",
            Self::GaussianNoise => "gaussian_noise",
            Self::Shift => "shift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: PerturbationFamily,
    pub block_grid: usize,
    pub block_ratio: f64,
    pub noise_variance: (f64, f64),
    /// Offsets in pixels of a 256-pixel image.
    pub shift_range: (i32, i32),
    /// Rescale `shift_range` by `width / 256`.
    pub shift_scales_with_size: bool,
    pub repeats: usize,
}

impl PerturbationSpec {
    pub fn new(family: PerturbationFamily) -> Self {
        Self {
            family,
            block_grid: 4,
            block_ratio: 0.1,
            noise_variance: (10.0, 50.0),
            shift_range: (-50, 50),
            shift_scales_with_size: true,
            repeats: 10,
        }
    }

    /// Number of masked cells: `ceil(ratio * grid^2)`.
    pub fn masked_cells(&self) -> usize {
        let cells = self.block_grid * self.block_grid;
        ((self.block_ratio * cells as f64).ceil() as usize).min(cells)
    }
}

/// Grid cell `(row, col)` covers rows `row*h/g .. (row+1)*h/g`.
pub fn cell_bounds(h: u32, w: u32, grid: usize, row: usize, col: usize) -> (u32, u32, u32, u32) {
    let g = grid as u32;
    let (r, c) = (row as u32, col as u32);
    (r * h / g, (r + 1) * h / g, c * w / g, (c + 1) * w / g)
}

pub fn block_mask(img: &RgbImage, grid: usize, cells: &[usize]) -> RgbImage {
    let mut out = img.clone();
    for &cell in cells {
        let (y0, y1, x0, x1) = cell_bounds(img.height(), img.width(), grid, cell / grid, cell % grid);
        for y in y0..y1 {
            for x in x0..x1 {
                out.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    out
}

pub fn gaussian_noise(img: &RgbImage, variance: f64, rng: &mut impl Rng) -> RgbImage {
    if variance <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    let raw = img
        .as_raw()
        .iter()
        .map(|&v| (f64::from(v) + normal.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(img.width(), img.height(), raw).unwrap()
}

/// Translates by `(dx, dy)`, replicating edge pixels into the uncovered area.
pub fn shift(img: &RgbImage, dx: i32, dy: i32) -> RgbImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let sx = (x as i64 - dx as i64).clamp(0, w - 1) as u32;
        let sy = (y as i64 - dy as i64).clamp(0, h - 1) as u32;
        *img.get_pixel(sx, sy)
    })
}

pub fn perturb(img: &RgbImage, spec: &PerturbationSpec, rng: &mut impl Rng) -> RgbImage {
    match spec.family {
        PerturbationFamily::BlockMask => {
            let cells = sample(rng, spec.block_grid * spec.block_grid, spec.masked_cells()).into_vec();
            block_mask(img, spec.block_grid, &cells)
        }
        PerturbationFamily::GaussianNoise => {
            let (lo, hi) = spec.noise_variance;
            let var = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            gaussian_noise(img, var, rng)
        }
        PerturbationFamily::Shift => {
            let (lo, hi) = spec.shift_range;
            let (lo, hi) = if spec.shift_scales_with_size {
                let s = f64::from(img.width()) / 256.0;
                ((f64::from(lo) * s).round() as i32, (f64::from(hi) * s).round() as i32)
            } else {
                (lo, hi)
            };
            let dx = rng.gen_range(lo..=hi);
            let dy = rng.gen_range(lo..=hi);
            shift(img, dx, dy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(n: u32) -> RgbImage {
        RgbImage::from_fn(n, n, |x, y| Rgb([(x * 9 + 1) as u8, (y * 7 + 1) as u8, ((x + y) * 3 + 1) as u8]))
    }

    #[test]
    fn block_mask_zeroes_two_cells() {
        let img = textured(32);
        let spec = PerturbationSpec::new(PerturbationFamily::BlockMask);
        assert_eq!(spec.masked_cells(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let out = perturb(&img, &spec, &mut rng);
            let mut zeroed = 0;
            for r in 0..4 {
                for c in 0..4 {
                    let (y0, y1, x0, x1) = cell_bounds(32, 32, 4, r, c);
                    let all_zero = (y0..y1).all(|y| (x0..x1).all(|x| out.get_pixel(x, y).0 == [0, 0, 0]));
                    let same = (y0..y1).all(|y| (x0..x1).all(|x| out.get_pixel(x, y) == img.get_pixel(x, y)));
                    assert!(all_zero ^ same);
                    zeroed += usize::from(all_zero);
                }
            }
            assert_eq!(zeroed, 2);
        }
    }

    #[test]
    fn identities() {
        let img = textured(20);
        assert_eq!(shift(&img, 0, 0), img);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng), img);
        let s = shift(&img, 3, -2);
        assert_eq!(s.get_pixel(10, 10), img.get_pixel(7, 12));
        assert_eq!(s.get_pixel(0, 19), img.get_pixel(0, 19));
        for fam in PerturbationFamily::ALL {
            let out = perturb(&img, &PerturbationSpec::new(fam), &mut rng);
            assert_eq!(out.dimensions(), img.dimensions());
        }
    }
}

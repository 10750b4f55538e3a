//! Blendfake synthesis: self-blended (SBI) and cross-blended (CBI) pseudo
//! fakes built from real frames and their landmarks, and assembly of the
//! four-anchor [`AlignedQuad`].
//!
//! Masks are the landmark convex hull, deformed (radial shrink with
//! per-vertex jitter), Gaussian-feathered and finally clipped back to the
//! hull, so a mask never reaches outside the face.

pub mod geometry;
pub mod raster;

use image::imageops::FilterType;
use image::RgbImage;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{organization_variant, AnchorKind, AttributeLabel, Organization};

pub use geometry::{convex_hull, Affine, LandmarkSet, Point};
pub use raster::{ColorTransfer, FloatImage, Mask};

/// Sampling ranges for blend recipes. A range with equal ends is a fixed value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    /// Radial scale applied to hull vertices before rasterizing the mask.
    pub deform_scale: (f64, f64),
    /// Relative per-vertex radial jitter amplitude.
    pub deform_jitter: f64,
    pub feather_sigma: (f64, f64),
    pub blend_ratio: (f64, f64),
    /// Per-channel multiplicative jitter half-width for the SBI source.
    pub sbi_contrast: f64,
    /// Per-channel additive jitter half-width (0–255 scale).
    pub sbi_brightness: f64,
    /// Downscale factor range for the SBI resize-reshape step.
    pub sbi_resize: (f64, f64),
    /// Maximum sub-pixel translation of the SBI source, in pixels.
    pub sbi_shift: f64,
    pub cbi_color_transfer: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            deform_scale: (0.8, 0.95),
            deform_jitter: 0.05,
            feather_sigma: (0.5, 1.5),
            blend_ratio: (0.75, 1.0),
            sbi_contrast: 0.1,
            sbi_brightness: 12.0,
            sbi_resize: (0.5, 0.9),
            sbi_shift: 1.0,
            cbi_color_transfer: true,
        }
    }
}

impl BlendConfig {
    /// Hard hull mask, no colour transfer, blend ratio 1.
    pub fn plain() -> Self {
        Self {
            deform_scale: (1.0, 1.0),
            deform_jitter: 0.0,
            feather_sigma: (0.0, 0.0),
            blend_ratio: (1.0, 1.0),
            sbi_contrast: 0.0,
            sbi_brightness: 0.0,
            sbi_resize: (1.0, 1.0),
            sbi_shift: 0.0,
            cbi_color_transfer: false,
        }
    }
}

fn draw(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformParams {
    pub scale: f64,
    pub jitter: f64,
    pub feather_sigma: f64,
}

/// Photometric and geometric perturbation of the SBI source copy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTransform {
    pub contrast: [f64; 3],
    pub brightness: [f64; 3],
    pub resize_factor: f64,
    pub shift: [f64; 2],
}

/// Everything needed to reproduce one blend. The mask itself is not
/// serialized; its support size is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendRecipe {
    #[serde(skip, default = "empty_mask")]
    pub mask: Mask,
    pub mask_support: usize,
    pub color_transfer: Option<ColorTransfer>,
    pub deform: DeformParams,
    pub blend_ratio: f64,
    pub source_transform: Option<SourceTransform>,
    /// Base-to-source coordinate map (CBI only).
    pub warp: Option<Affine>,
}

fn empty_mask() -> Mask {
    Mask::zeros(0, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlendKind {
    Sbi,
    Cbi,
}

#[derive(Clone, Debug)]
pub struct BlendfakeSample {
    pub image: RgbImage,
    pub kind: BlendKind,
    pub source_frame_id: String,
    pub recipe: BlendRecipe,
}

/// A recipe plus the prepared source layer, before compositing.
#[derive(Clone, Debug)]
pub struct BlendPlan {
    pub recipe: BlendRecipe,
    pub source: FloatImage,
}

impl BlendPlan {
    /// Composites the source over `base` under the recipe mask.
    pub fn render(&self, base: &RgbImage) -> RgbImage {
        let mut source = self.source.clone();
        if let Some(ct) = &self.recipe.color_transfer {
            for (i, &m) in self.recipe.mask.data.iter().enumerate() {
                if m > 0.0 {
                    let px = [source.data[i * 3], source.data[i * 3 + 1], source.data[i * 3 + 2]];
                    let out = ct.apply(px);
                    source.data[i * 3..i * 3 + 3].copy_from_slice(&out);
                }
            }
        }
        raster::composite(base, &source, &self.recipe.mask)
    }
}

fn sample_mask(
    width: u32,
    height: u32,
    landmarks: &LandmarkSet,
    cfg: &BlendConfig,
    rng: &mut impl Rng,
) -> Result<(Mask, DeformParams, f64)> {
    let hull = convex_hull(landmarks.points())?;
    let hull_mask = Mask::from_polygon(width, height, &hull);
    let deform = DeformParams {
        scale: draw(rng, cfg.deform_scale),
        jitter: cfg.deform_jitter,
        feather_sigma: draw(rng, cfg.feather_sigma),
    };
    let c = {
        let n = hull.len() as f64;
        hull.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n])
    };
    let deformed: Vec<Point> = hull
        .iter()
        .map(|p| {
            let j = if deform.jitter > 0.0 {
                rng.gen_range(-deform.jitter..=deform.jitter)
            } else {
                0.0
            };
            let s = deform.scale * (1.0 + j);
            [c[0] + (p[0] - c[0]) * s, c[1] + (p[1] - c[1]) * s]
        })
        .collect();
    let mut mask = if deformed == hull {
        hull_mask.clone()
    } else {
        let mut m = Mask::from_polygon(width, height, &deformed);
        m.multiply(&hull_mask);
        m
    };
    mask = mask.gaussian_blur(deform.feather_sigma);
    mask.multiply(&hull_mask);
    let ratio = draw(rng, cfg.blend_ratio);
    mask.scale(ratio);
    Ok((mask, deform, ratio))
}

fn transform_source(base: &RgbImage, cfg: &BlendConfig, rng: &mut impl Rng) -> (FloatImage, SourceTransform) {
    let t = SourceTransform {
        contrast: std::array::from_fn(|_| 1.0 + draw(rng, (-cfg.sbi_contrast, cfg.sbi_contrast))),
        brightness: std::array::from_fn(|_| draw(rng, (-cfg.sbi_brightness, cfg.sbi_brightness))),
        resize_factor: draw(rng, cfg.sbi_resize),
        shift: std::array::from_fn(|_| draw(rng, (-cfg.sbi_shift, cfg.sbi_shift))),
    };
    let (w, h) = base.dimensions();
    let resized = if t.resize_factor < 1.0 {
        let sw = ((w as f64 * t.resize_factor).round() as u32).max(1);
        let sh = ((h as f64 * t.resize_factor).round() as u32).max(1);
        let small = image::imageops::resize(base, sw, sh, FilterType::Triangle);
        image::imageops::resize(&small, w, h, FilterType::Triangle)
    } else {
        base.clone()
    };
    let src = FloatImage::from_rgb(&resized);
    let mut out = src.clone();
    for y in 0..h {
        for x in 0..w {
            let px = src.sample(x as f64 - t.shift[0], y as f64 - t.shift[1]);
            let i = ((y * w + x) * 3) as usize;
            for c in 0..3 {
                out.data[i + c] = (t.contrast[c] * (px[c] - 128.0) + 128.0 + t.brightness[c]).clamp(0.0, 255.0);
            }
        }
    }
    (out, t)
}

/// Samples an SBI recipe and source layer for `base`.
pub fn plan_sbi(base: &RgbImage, landmarks: &LandmarkSet, rng_seed: u64, cfg: &BlendConfig) -> Result<BlendPlan> {
    landmarks.validate_bounds(base.width(), base.height())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mask, deform, ratio) = sample_mask(base.width(), base.height(), landmarks, cfg, &mut rng)?;
    let (source, transform) = transform_source(base, cfg, &mut rng);
    Ok(BlendPlan {
        recipe: BlendRecipe {
            mask_support: mask.support_len(),
            mask,
            color_transfer: None,
            deform,
            blend_ratio: ratio,
            source_transform: Some(transform),
            warp: None,
        },
        source,
    })
}

/// Self-blended image: a photometrically and geometrically perturbed copy
/// of `base` blended back onto it under a landmark-hull mask.
pub fn generate_sbi(
    base: &RgbImage,
    landmarks: &LandmarkSet,
    frame_id: &str,
    rng_seed: u64,
    cfg: &BlendConfig,
) -> Result<BlendfakeSample> {
    let plan = plan_sbi(base, landmarks, rng_seed, cfg)?;
    Ok(BlendfakeSample {
        image: plan.render(base),
        kind: BlendKind::Sbi,
        source_frame_id: frame_id.to_string(),
        recipe: plan.recipe,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkMatch {
    pub frame_id: String,
    pub distance: f64,
}

/// Nearest pool entry by centroid-aligned mean landmark distance; ties go
/// to the lexicographically lowest frame id.
pub fn find_landmark_match(query: &LandmarkSet, pool: &[(String, &LandmarkSet)]) -> Result<LandmarkMatch> {
    let mut best: Option<LandmarkMatch> = None;
    for (id, lm) in pool {
        let d = query.aligned_distance(lm)?;
        let better = match &best {
            None => true,
            Some(b) => d < b.distance || (d == b.distance && id < &b.frame_id),
        };
        if better {
            best = Some(LandmarkMatch {
                frame_id: id.clone(),
                distance: d,
            });
        }
    }
    best.ok_or_else(|| Error::EmptyPool("no candidate frames".into()))
}

/// Samples a CBI recipe: `source` is warped onto `base` landmarks,
/// colour-matched inside the mask, and composited.
pub fn plan_cbi(
    base: &RgbImage,
    base_landmarks: &LandmarkSet,
    source: &RgbImage,
    source_landmarks: &LandmarkSet,
    rng_seed: u64,
    cfg: &BlendConfig,
) -> Result<BlendPlan> {
    if base_landmarks.count() != source_landmarks.count() {
        return Err(Error::Landmarks(format!(
            "landmark counts differ: {} vs {}",
            base_landmarks.count(),
            source_landmarks.count()
        )));
    }
    base_landmarks.validate_bounds(base.width(), base.height())?;
    source_landmarks.validate_bounds(source.width(), source.height())?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mask, deform, ratio) = sample_mask(base.width(), base.height(), base_landmarks, cfg, &mut rng)?;
    let warp = Affine::fit(base_landmarks.points(), source_landmarks.points())?;

    let src = FloatImage::from_rgb(source);
    let base_f = FloatImage::from_rgb(base);
    let mut warped = base_f.clone();
    let tol = 1e-6;
    let (mx, my) = ((source.width() - 1) as f64, (source.height() - 1) as f64);
    for y in 0..base.height() {
        for x in 0..base.width() {
            if mask.get(x, y) == 0.0 {
                continue;
            }
            let q = warp.apply([x as f64, y as f64]);
            if q[0] < -tol || q[1] < -tol || q[0] > mx + tol || q[1] > my + tol {
                return Err(Error::WarpOutOfBounds(format!(
                    "pixel ({x}, {y}) maps to ({:.2}, {:.2})",
                    q[0], q[1]
                )));
            }
            let px = src.sample(q[0], q[1]);
            let i = ((y * base.width() + x) * 3) as usize;
            warped.data[i..i + 3].copy_from_slice(&px);
        }
    }
    let color_transfer = cfg
        .cbi_color_transfer
        .then(|| ColorTransfer::match_statistics(&warped, &base_f, &mask));
    Ok(BlendPlan {
        recipe: BlendRecipe {
            mask_support: mask.support_len(),
            mask,
            color_transfer,
            deform,
            blend_ratio: ratio,
            source_transform: None,
            warp: Some(warp),
        },
        source: warped,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn generate_cbi(
    base: &RgbImage,
    base_landmarks: &LandmarkSet,
    source: &RgbImage,
    source_landmarks: &LandmarkSet,
    source_frame_id: &str,
    rng_seed: u64,
    cfg: &BlendConfig,
) -> Result<BlendfakeSample> {
    let plan = plan_cbi(base, base_landmarks, source, source_landmarks, rng_seed, cfg)?;
    Ok(BlendfakeSample {
        image: plan.render(base),
        kind: BlendKind::Cbi,
        source_frame_id: source_frame_id.to_string(),
        recipe: plan.recipe,
    })
}

/// A real frame as seen by the quad builder.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub frame_id: &'a str,
    pub video_id: &'a str,
    pub identity_id: &'a str,
    pub image: &'a RgbImage,
    pub landmarks: &'a LandmarkSet,
}

/// Candidate CBI sources, typically every training-split real frame.
#[derive(Clone, Debug, Default)]
pub struct CbiPool<'a> {
    entries: Vec<FrameInput<'a>>,
}

impl<'a> CbiPool<'a> {
    pub fn new(entries: Vec<FrameInput<'a>>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pool entries not belonging to `identity`.
    pub fn candidates(&self, identity: &str) -> Vec<(String, &'a LandmarkSet)> {
        self.entries
            .iter()
            .filter(|e| e.identity_id != identity)
            .map(|e| (e.frame_id.to_string(), e.landmarks))
            .collect()
    }

    pub fn get(&self, frame_id: &str) -> Option<&FrameInput<'a>> {
        self.entries.iter().find(|e| e.frame_id == frame_id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbiFailurePolicy {
    /// Skip the whole quad.
    #[default]
    Drop,
    /// Fill the CBI slot with a second SBI draw; recorded in the metadata.
    SubstituteSbi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadMeta {
    pub sbi_recipe: BlendRecipe,
    pub cbi_recipe: BlendRecipe,
    pub cbi_source: Option<String>,
    pub cbi_substituted: bool,
}

/// Four images aligned to one video frame, ordered real, SBI, CBI, deepfake.
#[derive(Clone, Debug)]
pub struct AlignedQuad {
    pub frame_id: String,
    pub video_id: String,
    pub identity_id: String,
    pub images: [RgbImage; 4],
    pub labels: [AttributeLabel; 4],
    pub meta: QuadMeta,
}

impl AlignedQuad {
    pub fn image(&self, kind: AnchorKind) -> &RgbImage {
        &self.images[kind.index()]
    }
}

/// Builds quads and counts the ones it had to drop.
#[derive(Clone, Debug, Default)]
pub struct QuadBuilder {
    pub config: BlendConfig,
    pub policy: CbiFailurePolicy,
    pub dropped: usize,
    pub substituted: usize,
}

impl QuadBuilder {
    pub fn new(config: BlendConfig, policy: CbiFailurePolicy) -> Self {
        Self {
            config,
            policy,
            dropped: 0,
            substituted: 0,
        }
    }

    /// Returns `Ok(None)` when the quad is dropped.
    pub fn build(
        &mut self,
        frame: &FrameInput<'_>,
        deepfake: &RgbImage,
        pool: &CbiPool<'_>,
        rng_seed: u64,
    ) -> Result<Option<AlignedQuad>> {
        if deepfake.dimensions() != frame.image.dimensions() {
            return Err(Error::Shape(format!(
                "deepfake {:?} vs real {:?} for frame {}",
                deepfake.dimensions(),
                frame.image.dimensions(),
                frame.frame_id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let sbi_seed = rng.next_u64();
        let cbi_seed = rng.next_u64();
        let fallback_seed = rng.next_u64();

        let sbi = match generate_sbi(frame.image, frame.landmarks, frame.frame_id, sbi_seed, &self.config) {
            Ok(s) => s,
            Err(Error::DegenerateHull(_)) | Err(Error::Landmarks(_)) => {
                self.dropped += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };

        let cbi = find_landmark_match(frame.landmarks, &pool.candidates(frame.identity_id)).and_then(|m| {
            let src = pool
                .get(&m.frame_id)
                .ok_or_else(|| Error::EmptyPool(format!("pool lost {}", m.frame_id)))?;
            generate_cbi(
                frame.image,
                frame.landmarks,
                src.image,
                src.landmarks,
                &m.frame_id,
                cbi_seed,
                &self.config,
            )
        });
        let (cbi, substituted) = match cbi {
            Ok(c) => (c, false),
            Err(Error::EmptyPool(_) | Error::WarpOutOfBounds(_) | Error::DegenerateHull(_) | Error::Landmarks(_)) => {
                match self.policy {
                    CbiFailurePolicy::Drop => {
                        self.dropped += 1;
                        return Ok(None);
                    }
                    CbiFailurePolicy::SubstituteSbi => {
                        self.substituted += 1;
                        let s = generate_sbi(frame.image, frame.landmarks, frame.frame_id, fallback_seed, &self.config)?;
                        (s, true)
                    }
                }
            }
            Err(e) => return Err(e),
        };

        let labels = AnchorKind::ALL.map(|k| organization_variant(k, Organization::R2B2D));
        Ok(Some(AlignedQuad {
            frame_id: frame.frame_id.to_string(),
            video_id: frame.video_id.to_string(),
            identity_id: frame.identity_id.to_string(),
            images: [frame.image.clone(), sbi.image, cbi.image, deepfake.clone()],
            labels,
            meta: QuadMeta {
                sbi_recipe: sbi.recipe,
                cbi_source: (!substituted).then(|| cbi.source_frame_id.clone()),
                cbi_recipe: cbi.recipe,
                cbi_substituted: substituted,
            },
        }))
    }
}

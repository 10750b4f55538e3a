//! Procedural desk-scale dataset.
//!
//! Each identity is a parametric face (ellipse, skin tone, two-wave texture,
//! eyes, brows, mouth) on a per-video background. A "deepfake" of a frame is
//! a generated inner face pasted back with a feathered mask, carrying up to
//! three cues that mirror the forgery attributes:
//!
//! * blending: resampling softness and a colour mismatch of the pasted
//!   region;
//! * identity: the face texture of a different identity;
//! * artifact: a periodic high-frequency pattern from the generator.
//!
//! With all strengths zero the deepfake equals the real frame bit-for-bit.
//! Landmarks: 81 points (34 contour, 2×5 brows, 2×8 eyes, 9 nose, 12 mouth).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quads::{build_quads, QuadBuildStats};
use super::{FrameRecord, LoadedFrame, Manifest, Split};
use crate::blendfake::{AlignedQuad, BlendConfig, CbiFailurePolicy, LandmarkSet};
use crate::error::Result;

pub const DESK_LANDMARKS: usize = 81;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueStrengths {
    pub blending: f64,
    pub identity: f64,
    pub artifact: f64,
}

impl CueStrengths {
    pub const ZERO: CueStrengths = CueStrengths {
        blending: 0.0,
        identity: 0.0,
        artifact: 0.0,
    };
}

/// Spatial pattern of the injected generative artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtifactStyle {
    /// Period-2 checkerboard, typical of transposed-convolution upsampling.
    Checkerboard,
    /// Period-3 diagonal stripes.
    Stripes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueSet {
    pub strengths: CueStrengths,
    pub style: ArtifactStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskSpec {
    pub seed: u64,
    pub image_size: u32,
    pub train_identities: usize,
    pub test_identities: usize,
    pub videos_per_identity: usize,
    pub frames_per_video: usize,
    pub train_cues: CueSet,
    /// Cues of the held-out split; differing from `train_cues` gives a
    /// cue-shifted test set.
    pub test_cues: CueSet,
}

impl Default for DeskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            train_identities: 25,
            test_identities: 8,
            videos_per_identity: 4,
            frames_per_video: 5,
            train_cues: CueSet {
                strengths: CueStrengths {
                    blending: 1.0,
                    identity: 1.0,
                    artifact: 1.0,
                },
                style: ArtifactStyle::Checkerboard,
            },
            test_cues: CueSet {
                strengths: CueStrengths {
                    blending: 0.7,
                    identity: 1.0,
                    artifact: 1.0,
                },
                style: ArtifactStyle::Stripes,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Identity {
    id: String,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    tex_freq: [f64; 2],
    tex_angle: [f64; 2],
    tex_amp: [f64; 2],
    eye_dx: f64,
    eye_y: f64,
    mouth_w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
}

#[derive(Clone, Copy, Debug)]
struct VideoLook {
    background: [f64; 3],
    gradient: [f64; 3],
    seam_offset: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct DeskDataset {
    pub spec: DeskSpec,
    pub frames: Vec<LoadedFrame>,
}

impl DeskDataset {
    pub fn generate(spec: &DeskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n_ids = spec.train_identities + spec.test_identities;
        let identities: Vec<Identity> = (0..n_ids).map(|i| random_identity(&mut rng, i, spec.image_size)).collect();
        let mut frames = Vec::new();
        for (i, ident) in identities.iter().enumerate() {
            let split = if i < spec.train_identities { Split::Train } else { Split::Test };
            let cues = match split {
                Split::Train => spec.train_cues,
                Split::Test => spec.test_cues,
            };
            // swap donors come from the same split
            let (lo, hi) = match split {
                Split::Train => (0, spec.train_identities),
                Split::Test => (spec.train_identities, n_ids),
            };
            for v in 0..spec.videos_per_identity {
                let video_id = format!("{}_v{v}", ident.id);
                let look = random_look(&mut rng);
                let donor = if hi - lo > 1 {
                    let mut d = rng.gen_range(lo..hi - 1);
                    if d >= i {
                        d += 1;
                    }
                    &identities[d]
                } else {
                    ident
                };
                for f in 0..spec.frames_per_video {
                    let frame_id = format!("{video_id}_f{f}");
                    let pose = random_pose(&mut rng, spec.image_size);
                    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                    let real_f = render_face(ident, &pose, &look, spec.image_size, phase);
                    let fake_f = render_deepfake(&real_f, ident, donor, &pose, &look, spec.image_size, phase, &cues);
                    let landmarks = face_landmarks(ident, &pose, spec.image_size);
                    frames.push(LoadedFrame {
                        record: FrameRecord {
                            frame_id: frame_id.clone(),
                            video_id: video_id.clone(),
                            identity_id: ident.id.clone(),
                            real_path: PathBuf::from(format!("real/{frame_id}.png")),
                            deepfake_path: PathBuf::from(format!("deepfake/{frame_id}.png")),
                            landmark_path: PathBuf::from(format!("landmarks/{frame_id}.txt")),
                            split,
                        },
                        real: to_rgb(&real_f, spec.image_size),
                        deepfake: to_rgb(&fake_f, spec.image_size),
                        landmarks,
                    });
                }
            }
        }
        Self {
            spec: spec.clone(),
            frames,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LoadedFrame> {
        self.frames.iter().filter(move |f| f.record.split == split)
    }

    /// Builds aligned quads for one split. CBI donors always come from the
    /// training split.
    pub fn quads(
        &self,
        split: Split,
        config: &BlendConfig,
        policy: CbiFailurePolicy,
        seed: u64,
    ) -> Result<(Vec<AlignedQuad>, QuadBuildStats)> {
        let frames: Vec<LoadedFrame> = self.split(split).cloned().collect();
        let pool: Vec<LoadedFrame> = self.split(Split::Train).cloned().collect();
        build_quads(&frames, &pool, config, policy, seed)
    }

    /// Writes images, landmark files and `manifest.json` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        for sub in ["real", "deepfake", "landmarks"] {
            fs::create_dir_all(out_dir.join(sub))?;
        }
        for f in &self.frames {
            f.real.save(out_dir.join(&f.record.real_path))?;
            f.deepfake.save(out_dir.join(&f.record.deepfake_path))?;
            fs::write(out_dir.join(&f.record.landmark_path), f.landmarks.to_text())?;
        }
        let manifest = Manifest::new(self.frames.iter().map(|f| f.record.clone()).collect());
        let path = out_dir.join("manifest.json");
        manifest.write(&path)?;
        fs::write(out_dir.join("desk_spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(path)
    }
}

/// Generates the desk dataset described by `spec` into `out_dir` and returns
/// the manifest path.
pub fn synth_desk_dataset(spec: &DeskSpec, out_dir: &Path) -> Result<PathBuf> {
    DeskDataset::generate(spec).write(out_dir)
}

fn random_identity(rng: &mut ChaCha8Rng, i: usize, size: u32) -> Identity {
    let s = size as f64;
    Identity {
        id: format!("id{i:03}"),
        rx: s * rng.gen_range(0.26..0.32),
        ry: s * rng.gen_range(0.33..0.39),
        skin: [rng.gen_range(140.0..220.0), rng.gen_range(100.0..170.0), rng.gen_range(80.0..150.0)],
        tex_freq: [rng.gen_range(0.15..0.45), rng.gen_range(0.15..0.45)],
        tex_angle: [rng.gen_range(0.0..PI), rng.gen_range(0.0..PI)],
        tex_amp: [rng.gen_range(6.0..16.0), rng.gen_range(6.0..16.0)],
        eye_dx: rng.gen_range(0.35..0.5),
        eye_y: rng.gen_range(-0.3..-0.15),
        mouth_w: rng.gen_range(0.3..0.5),
    }
}

fn random_look(rng: &mut ChaCha8Rng) -> VideoLook {
    VideoLook {
        background: std::array::from_fn(|_| rng.gen_range(30.0..110.0)),
        gradient: std::array::from_fn(|_| rng.gen_range(-30.0..30.0)),
        seam_offset: std::array::from_fn(|_| {
            let m = rng.gen_range(10.0..18.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }),
    }
}

fn random_pose(rng: &mut ChaCha8Rng, size: u32) -> Pose {
    let s = size as f64;
    Pose {
        cx: s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        cy: s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        scale: rng.gen_range(0.95..1.05),
    }
}

/// Face-normalized coordinates: unit ellipse = face contour.
fn to_face(ident: &Identity, pose: &Pose, x: f64, y: f64) -> (f64, f64) {
    ((x - pose.cx) / (ident.rx * pose.scale), (y - pose.cy) / (ident.ry * pose.scale))
}

fn from_face(ident: &Identity, pose: &Pose, u: f64, v: f64) -> [f64; 2] {
    [pose.cx + u * ident.rx * pose.scale, pose.cy + v * ident.ry * pose.scale]
}

fn texture(ident: &Identity, u: f64, v: f64, phase: f64, size: u32) -> f64 {
    let s = size as f64 / 4.0;
    (0..2)
        .map(|k| {
            let (c, sn) = (ident.tex_angle[k].cos(), ident.tex_angle[k].sin());
            ident.tex_amp[k] * (ident.tex_freq[k] * s * (c * u + sn * v) * 2.0 + phase * 0.1 * k as f64).sin()
        })
        .sum()
}

/// Skin + texture + facial features at face coordinates `(u, v)`.
fn face_color(ident: &Identity, u: f64, v: f64, phase: f64, size: u32) -> [f64; 3] {
    let t = texture(ident, u, v, phase, size);
    let mut c: [f64; 3] = std::array::from_fn(|k| ident.skin[k] + t);
    // shading toward the rim
    let r2 = u * u + v * v;
    for ch in &mut c {
        *ch *= 1.0 - 0.15 * r2;
    }
    let eye = |ex: f64| {
        let du = (u - ex) / 0.16;
        let dv = (v - ident.eye_y) / 0.08;
        du * du + dv * dv <= 1.0
    };
    if eye(-ident.eye_dx) || eye(ident.eye_dx) {
        c = [40.0, 30.0, 30.0];
    }
    let brow = |ex: f64| (u - ex).abs() < 0.2 && (v - (ident.eye_y - 0.18)).abs() < 0.035;
    if brow(-ident.eye_dx) || brow(ident.eye_dx) {
        c = [70.0, 50.0, 40.0];
    }
    if u.abs() < ident.mouth_w && (v - 0.45).abs() < 0.05 {
        c = [150.0, 60.0, 60.0];
    }
    c
}

type Canvas = Vec<f64>;

fn render_face(ident: &Identity, pose: &Pose, look: &VideoLook, size: u32, phase: f64) -> Canvas {
    let mut out = vec![0.0; (size * size * 3) as usize];
    for y in 0..size {
        for x in 0..size {
            let i = ((y * size + x) * 3) as usize;
            let (u, v) = to_face(ident, pose, x as f64, y as f64);
            let px = if u * u + v * v <= 1.0 {
                face_color(ident, u, v, phase, size)
            } else {
                let g = y as f64 / size as f64;
                std::array::from_fn(|k| look.background[k] + look.gradient[k] * g)
            };
            out[i..i + 3].copy_from_slice(&px);
        }
    }
    out
}

const INNER: f64 = 0.8;
const FEATHER: f64 = 0.08;

fn artifact(style: ArtifactStyle, x: u32, y: u32) -> f64 {
    match style {
        ArtifactStyle::Checkerboard => {
            if (x + y) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        ArtifactStyle::Stripes => match (x + 2 * y) % 3 {
            0 => 1.0,
            1 => -0.5,
            _ => -0.5,
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn render_deepfake(
    real: &Canvas,
    ident: &Identity,
    donor: &Identity,
    pose: &Pose,
    look: &VideoLook,
    size: u32,
    phase: f64,
    cues: &CueSet,
) -> Canvas {
    let s = cues.strengths;
    if s == CueStrengths::ZERO {
        return real.clone();
    }
    let n = size as usize;
    let radius: Vec<f64> = (0..n * n)
        .map(|i| {
            let (u, v) = to_face(ident, pose, (i % n) as f64, (i / n) as f64);
            (u * u + v * v).sqrt()
        })
        .collect();

    // The "generated" face: donor texture on the target's geometry and tone.
    let mut gen = real.clone();
    if s.identity != 0.0 {
        for (i, &r) in radius.iter().enumerate() {
            if r > INNER + FEATHER {
                continue;
            }
            let (u, v) = to_face(ident, pose, (i % n) as f64, (i / n) as f64);
            let dt = texture(donor, u, v, phase, size) - texture(ident, u, v, phase, size);
            for k in 0..3 {
                gen[i * 3 + k] += s.identity * dt;
            }
        }
    }
    // Upsampling softness and residual colour mismatch of the swapped region.
    if s.blending != 0.0 {
        let soft = box_blur(&gen, n);
        for i in 0..n * n {
            for k in 0..3 {
                let j = i * 3 + k;
                gen[j] += s.blending * (soft[j] - gen[j] + look.seam_offset[k]);
            }
        }
    }
    if s.artifact != 0.0 {
        for i in 0..n * n {
            let a = 10.0 * s.artifact * artifact(cues.style, (i % n) as u32, (i / n) as u32);
            for k in 0..3 {
                gen[i * 3 + k] += a;
            }
        }
    }
    // Feathered paste onto the target frame.
    let mut out = real.clone();
    for (i, &r) in radius.iter().enumerate() {
        let m = ((INNER + FEATHER - r) / (2.0 * FEATHER)).clamp(0.0, 1.0);
        if m == 0.0 {
            continue;
        }
        for k in 0..3 {
            let j = i * 3 + k;
            out[j] = real[j] + m * (gen[j] - real[j]);
        }
    }
    out
}

fn box_blur(c: &Canvas, n: usize) -> Canvas {
    let mut out = vec![0.0; c.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0.0; 3];
            let mut cnt = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(n) {
                for xx in x.saturating_sub(1)..(x + 2).min(n) {
                    for k in 0..3 {
                        acc[k] += c[(yy * n + xx) * 3 + k];
                    }
                    cnt += 1.0;
                }
            }
            for k in 0..3 {
                out[(y * n + x) * 3 + k] = acc[k] / cnt;
            }
        }
    }
    out
}

fn to_rgb(c: &Canvas, size: u32) -> RgbImage {
    RgbImage::from_raw(size, size, c.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()).unwrap()
}

fn face_landmarks(ident: &Identity, pose: &Pose, size: u32) -> LandmarkSet {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(DESK_LANDMARKS);
    for k in 0..34 {
        let a = 2.0 * PI * k as f64 / 34.0;
        pts.push(from_face(ident, pose, 0.97 * a.cos(), 0.97 * a.sin()));
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let u = side * ident.eye_dx - 0.2 + 0.1 * k as f64;
            pts.push(from_face(ident, pose, u, ident.eye_y - 0.18));
        }
    }
    for side in [-1.0, 1.0] {
        for k in 0..8 {
            let a = 2.0 * PI * k as f64 / 8.0;
            pts.push(from_face(ident, pose, side * ident.eye_dx + 0.16 * a.cos(), ident.eye_y + 0.08 * a.sin()));
        }
    }
    for k in 0..9 {
        let t = k as f64 / 8.0;
        pts.push(from_face(ident, pose, 0.12 * (t - 0.5) * (k % 2) as f64, -0.1 + 0.4 * t));
    }
    for k in 0..12 {
        let a = 2.0 * PI * k as f64 / 12.0;
        pts.push(from_face(ident, pose, ident.mouth_w * a.cos(), 0.45 + 0.05 * a.sin()));
    }
    let max = (size - 1) as f64;
    for p in &mut pts {
        p[0] = p[0].clamp(0.0, max);
        p[1] = p[1].clamp(0.0, max);
    }
    LandmarkSet::new(pts).expect("finite landmarks")
}

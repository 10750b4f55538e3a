//! Aligned quad construction from loaded frames, and the quad manifest
//! written by the `synth` command.
//!
//! Quad manifest (JSON, `version` = [`QUAD_MANIFEST_VERSION`]): one entry per
//! quad with the four image paths in anchor order (real, sbi, cbi, deepfake),
//! their attribute labels, and the blend recipes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LoadedFrame;
use crate::blendfake::{AlignedQuad, BlendConfig, CbiFailurePolicy, CbiPool, QuadBuilder, QuadMeta};
use crate::error::{Error, Result};
use crate::labels::{AnchorKind, AttributeLabel};

pub const QUAD_MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadBuildStats {
    pub built: usize,
    pub dropped: usize,
    pub substituted: usize,
}

/// Builds one quad per frame. CBI donors are drawn from `pool` (other
/// identities only). Frame `i` uses the `i`-th draw of a generator seeded
/// with `seed`.
pub fn build_quads(
    frames: &[LoadedFrame],
    pool: &[LoadedFrame],
    config: &BlendConfig,
    policy: CbiFailurePolicy,
    seed: u64,
) -> Result<(Vec<AlignedQuad>, QuadBuildStats)> {
    let pool = CbiPool::new(pool.iter().map(LoadedFrame::as_input).collect());
    let mut builder = QuadBuilder::new(config.clone(), policy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quads = Vec::with_capacity(frames.len());
    for f in frames {
        let s = rng.next_u64();
        if let Some(q) = builder.build(&f.as_input(), &f.deepfake, &pool, s)? {
            quads.push(q);
        }
    }
    let stats = QuadBuildStats {
        built: quads.len(),
        dropped: builder.dropped,
        substituted: builder.substituted,
    };
    Ok((quads, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadEntry {
    pub frame_id: String,
    pub video_id: String,
    pub identity_id: String,
    pub images: [PathBuf; 4],
    pub labels: [AttributeLabel; 4],
    pub meta: QuadMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadManifest {
    pub version: u32,
    pub stats: QuadBuildStats,
    pub quads: Vec<QuadEntry>,
}

/// Writes every quad's images as PNG under `out_dir/quads/` and the manifest
/// to `out_dir/quads.json`; returns the manifest path.
pub fn write_quad_manifest(quads: &[AlignedQuad], stats: QuadBuildStats, out_dir: &Path) -> Result<PathBuf> {
    let img_dir = out_dir.join("quads");
    fs::create_dir_all(&img_dir)?;
    let mut entries = Vec::with_capacity(quads.len());
    for q in quads {
        let images: [PathBuf; 4] = std::array::from_fn(|k| {
            PathBuf::from("quads").join(format!("{}_{}.png", q.frame_id, AnchorKind::ALL[k].name()))
        });
        for (img, rel) in q.images.iter().zip(&images) {
            img.save(out_dir.join(rel))?;
        }
        entries.push(QuadEntry {
            frame_id: q.frame_id.clone(),
            video_id: q.video_id.clone(),
            identity_id: q.identity_id.clone(),
            images,
            labels: q.labels,
            meta: q.meta.clone(),
        });
    }
    let manifest = QuadManifest {
        version: QUAD_MANIFEST_VERSION,
        stats,
        quads: entries,
    };
    let path = out_dir.join("quads.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_quad_manifest(path: &Path) -> Result<Vec<AlignedQuad>> {
    let manifest: QuadManifest = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.version != QUAD_MANIFEST_VERSION {
        return Err(Error::Version {
            expected: QUAD_MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let missing: Vec<PathBuf> = manifest
        .quads
        .iter()
        .flat_map(|q| q.images.iter().map(|p| root.join(p)))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles { missing });
    }
    manifest
        .quads
        .into_iter()
        .map(|q| {
            let load = |k: usize| -> Result<image::RgbImage> { Ok(image::open(root.join(&q.images[k]))?.to_rgb8()) };
            Ok(AlignedQuad {
                images: [load(0)?, load(1)?, load(2)?, load(3)?],
                frame_id: q.frame_id,
                video_id: q.video_id,
                identity_id: q.identity_id,
                labels: q.labels,
                meta: q.meta,
            })
        })
        .collect()
}

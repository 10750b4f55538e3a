//! Dataset manifests and the procedural desk-scale dataset.
//!
//! Manifest format (JSON, `version` = [`MANIFEST_VERSION`]):
//!
//! ```json
//! {
//!   "version": 1,
//!   "records": [
//!     {"frame_id": "v003_f02", "video_id": "v003", "identity_id": "id001",
//!      "real_path": "real/v003_f02.png", "deepfake_path": "deepfake/v003_f02.png",
//!      "landmark_path": "landmarks/v003_f02.txt", "split": "train"}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Landmark files
//! hold one `x y` row per point.

pub mod desk;
pub mod quads;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::blendfake::{AlignedQuad, BlendConfig, CbiFailurePolicy, FrameInput, LandmarkSet};
use crate::error::{Error, Result};

pub use desk::{synth_desk_dataset, ArtifactStyle, CueSet, CueStrengths, DeskDataset, DeskSpec};
pub use quads::{build_quads, load_quad_manifest, write_quad_manifest, QuadBuildStats, QuadEntry, QuadManifest, QUAD_MANIFEST_VERSION};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub video_id: String,
    pub identity_id: String,
    pub real_path: PathBuf,
    pub deepfake_path: PathBuf,
    pub landmark_path: PathBuf,
    pub split: Split,
}

impl FrameRecord {
    pub fn load_real(&self) -> Result<RgbImage> {
        Ok(image::open(&self.real_path)?.to_rgb8())
    }

    pub fn load_deepfake(&self) -> Result<RgbImage> {
        Ok(image::open(&self.deepfake_path)?.to_rgb8())
    }

    pub fn load_landmarks(&self) -> Result<LandmarkSet> {
        LandmarkSet::parse(&fs::read_to_string(&self.landmark_path)?)
    }

    fn paths(&self) -> [&Path; 3] {
        [&self.real_path, &self.deepfake_path, &self.landmark_path]
    }
}

/// A frame with its pixels and landmarks held in memory.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub record: FrameRecord,
    pub real: RgbImage,
    pub deepfake: RgbImage,
    pub landmarks: LandmarkSet,
}

impl LoadedFrame {
    pub fn load(record: &FrameRecord) -> Result<Self> {
        Ok(Self {
            real: record.load_real()?,
            deepfake: record.load_deepfake()?,
            landmarks: record.load_landmarks()?,
            record: record.clone(),
        })
    }

    pub fn as_input(&self) -> FrameInput<'_> {
        FrameInput {
            frame_id: &self.record.frame_id,
            video_id: &self.record.video_id,
            identity_id: &self.record.identity_id,
            image: &self.real,
            landmarks: &self.landmarks,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<FrameRecord>,
}

impl Manifest {
    pub fn new(records: Vec<FrameRecord>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            records,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Reads and validates a manifest. Rejects duplicate frame ids, videos that
/// change identity or straddle splits, and lists every referenced file that
/// does not exist.
pub fn load_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            expected: MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut records = manifest.records;
    for r in &mut records {
        for p in [&mut r.real_path, &mut r.deepfake_path, &mut r.landmark_path] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
    }
    validate_records(&records)?;
    Ok(records)
}

pub fn validate_records(records: &[FrameRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.frame_id.as_str()) {
            return Err(Error::DuplicateFrame(r.frame_id.clone()));
        }
    }
    let mut videos: HashMap<&str, (&str, Split)> = HashMap::new();
    for r in records {
        match videos.get(r.video_id.as_str()) {
            None => {
                videos.insert(&r.video_id, (&r.identity_id, r.split));
            }
            Some(&(identity, split)) => {
                if split != r.split {
                    return Err(Error::SplitLeak(r.video_id.clone()));
                }
                if identity != r.identity_id {
                    return Err(Error::Manifest(format!(
                        "video `{}` has identities `{identity}` and `{}`",
                        r.video_id, r.identity_id
                    )));
                }
            }
        }
    }
    let mut missing: Vec<PathBuf> = Vec::new();
    for r in records {
        for p in r.paths() {
            if !p.exists() {
                missing.push(p.to_path_buf());
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingFiles { missing });
    }
    Ok(())
}

/// Loads every frame of a manifest into memory.
pub fn load_frames(path: &Path) -> Result<Vec<LoadedFrame>> {
    load_manifest(path)?.iter().map(LoadedFrame::load).collect()
}

/// Builds quads for one split of `frames`. CBI donors come from the training
/// split; `pool_size` keeps only that many donor frames, lowest frame ids
/// first.
pub fn split_quads(
    frames: &[LoadedFrame],
    split: Split,
    pool_size: Option<usize>,
    config: &BlendConfig,
    policy: CbiFailurePolicy,
    seed: u64,
) -> Result<(Vec<AlignedQuad>, QuadBuildStats)> {
    let selected: Vec<LoadedFrame> = frames.iter().filter(|f| f.record.split == split).cloned().collect();
    let mut pool: Vec<LoadedFrame> = frames.iter().filter(|f| f.record.split == Split::Train).cloned().collect();
    if let Some(n) = pool_size {
        pool.sort_by(|a, b| a.record.frame_id.cmp(&b.record.frame_id));
        pool.truncate(n);
    }
    build_quads(&selected, &pool, config, policy, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, video: &str, split: Split, dir: &Path) -> FrameRecord {
        FrameRecord {
            frame_id: id.into(),
            video_id: video.into(),
            identity_id: format!("id-{video}"),
            real_path: dir.join(format!("{id}_r.png")),
            deepfake_path: dir.join(format!("{id}_d.png")),
            landmark_path: dir.join(format!("{id}.txt")),
            split,
        }
    }

    fn touch(r: &FrameRecord) {
        for p in r.paths() {
            fs::write(p, b"x").unwrap();
        }
    }

    #[test]
    fn empty_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        Manifest::new(vec![]).write(&p).unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let a = record("f1", "v1", Split::Train, dir.path());
        touch(&a);
        let p = dir.path().join("m.json");
        Manifest::new(vec![a.clone(), a]).write(&p).unwrap();
        match load_manifest(&p) {
            Err(Error::DuplicateFrame(id)) => assert_eq!(id, "f1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_leak_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = record("f1", "v1", Split::Train, dir.path());
        let b = record("f2", "v1", Split::Test, dir.path());
        touch(&a);
        touch(&b);
        assert!(matches!(validate_records(&[a, b]), Err(Error::SplitLeak(v)) if v == "v1"));
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"version": 7, "records": []}"#).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Version { expected: 1, found: 7 })));
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = record("f1", "v1", Split::Train, dir.path());
        touch(&a);
        a.real_path = PathBuf::from("f1_r.png");
        a.deepfake_path = PathBuf::from("f1_d.png");
        a.landmark_path = PathBuf::from("f1.txt");
        let p = dir.path().join("m.json");
        Manifest::new(vec![a]).write(&p).unwrap();
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs[0].real_path, dir.path().join("f1_r.png"));
    }
}

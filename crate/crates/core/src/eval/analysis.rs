//! Model-level analysis: embed items, re-embed perturbed copies, and report
//! mPD per perturbation family alongside the anchor-ordering statistic.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latent::{mpd, ordering_statistic_with, pd_per_item, EmbeddingDump, EmbeddingRow, PdForm};
use super::metrics::{ScoreSet, ScoredItem};
use super::perturb::{perturb, PerturbationFamily, PerturbationSpec};
use crate::error::Result;
use crate::labels::AnchorKind;
use crate::model::OprModel;

/// An image to analyse together with its anchor kind.
#[derive(Clone, Debug)]
pub struct AnalysisItem<'a> {
    pub item_id: String,
    pub video_id: String,
    pub kind: AnchorKind,
    pub image: &'a RgbImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMpd {
    pub family: PerturbationFamily,
    pub mpd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub items: usize,
    pub d: usize,
    pub form: PdForm,
    pub families: Vec<FamilyMpd>,
    /// Mean of the per-family values.
    pub mpd: f64,
    pub ordering: f64,
    /// Per-item PD averaged over families, in dump order.
    #[serde(skip)]
    pub item_pd: Vec<f64>,
}

const CHUNK: usize = 64;

pub fn embed_items(model: &OprModel, items: &[AnalysisItem<'_>], heads: bool) -> Result<EmbeddingDump> {
    let images: Vec<&RgbImage> = items.iter().map(|i| i.image).collect();
    let (_, vecs) = model.infer(&images, heads, CHUNK)?;
    let rows = items
        .iter()
        .zip(vecs)
        .map(|(i, vector)| EmbeddingRow {
            item_id: i.item_id.clone(),
            kind: i.kind,
            vector,
        })
        .collect();
    EmbeddingDump::new(model.backbone().embedding_dim(), rows)
}

/// Frame-level scores with real = 0 and every fake kind = 1.
pub fn score_items(model: &OprModel, items: &[AnalysisItem<'_>], heads: bool) -> Result<ScoreSet> {
    let images: Vec<&RgbImage> = items.iter().map(|i| i.image).collect();
    let scores = model.predict(&images, heads, CHUNK)?;
    Ok(ScoreSet::new(
        items
            .iter()
            .zip(scores)
            .map(|(i, score)| ScoredItem {
                item_id: format!("{}:{}", i.item_id, i.kind.name()),
                video_id: i.video_id.clone(),
                score,
                label: i.kind.detection_label().0,
            })
            .collect(),
    ))
}

/// Embeds `items`, perturbs each one `repeats` times per family and returns
/// the dump plus the regularity and ordering report. `rank` orders anchor
/// kinds for the ordering statistic.
pub fn analyze_latent(
    model: &OprModel,
    items: &[AnalysisItem<'_>],
    heads: bool,
    families: &[PerturbationSpec],
    form: PdForm,
    seed: u64,
    rank: impl Fn(AnchorKind) -> f64,
) -> Result<(EmbeddingDump, LatentReport)> {
    let dump = embed_items(model, items, heads)?;
    let mut out = Vec::with_capacity(families.len());
    let mut item_pd = vec![0.0; items.len()];
    for (fi, spec) in families.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(fi as u64));
        let perturbed: Vec<RgbImage> = items
            .iter()
            .flat_map(|i| (0..spec.repeats).map(|_| perturb(i.image, spec, &mut rng)).collect::<Vec<_>>())
            .collect();
        let refs: Vec<&RgbImage> = perturbed.iter().collect();
        let (_, vecs) = model.infer(&refs, heads, CHUNK)?;
        let grouped: Vec<Vec<Vec<f64>>> = vecs.chunks(spec.repeats.max(1)).map(|c| c.to_vec()).collect();
        for (acc, pd) in item_pd.iter_mut().zip(pd_per_item(&dump, &grouped, form)?) {
            *acc += pd / families.len() as f64;
        }
        out.push(FamilyMpd {
            family: spec.family,
            mpd: mpd(&dump, &grouped, form)?,
        });
    }
    let mean = out.iter().map(|f| f.mpd).sum::<f64>() / out.len().max(1) as f64;
    let report = LatentReport {
        items: dump.len(),
        d: dump.d,
        form,
        mpd: mean,
        ordering: ordering_statistic_with(&dump, rank)?,
        families: out,
        item_pd,
    };
    Ok((dump, report))
}

/// The three families at their default settings.
pub fn default_suite() -> Vec<PerturbationSpec> {
    PerturbationFamily::ALL.iter().map(|&f| PerturbationSpec::new(f)).collect()
}

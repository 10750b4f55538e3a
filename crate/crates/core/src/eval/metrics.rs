//! Frame- and video-level detection metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub video_id: String,
    pub score: f64,
    /// 1 = fake.
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub items: Vec<ScoredItem>,
}

impl ScoreSet {
    pub fn new(items: Vec<ScoredItem>) -> Self {
        Self { items }
    }

    /// Items without ids; each one is its own video.
    pub fn from_pairs(scores: &[f64], labels: &[u8]) -> Self {
        let items = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&score, &label))| ScoredItem {
                item_id: i.to_string(),
                video_id: i.to_string(),
                score,
                label,
            })
            .collect();
        Self { items }
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for it in &self.items {
            if !it.score.is_finite() {
                return Err(Error::Metric(format!("non-finite score for `{}`", it.item_id)));
            }
            match it.label {
                0 => neg.push(it.score),
                1 => pos.push(it.score),
                l => return Err(Error::Metric(format!("label {l} for `{}`", it.item_id))),
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Metric(format!(
                "need both classes, got {} positive and {} negative",
                pos.len(),
                neg.len()
            )));
        }
        Ok((pos, neg))
    }
}

/// Mann-Whitney AUC; tied pairs count one half.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    let (pos, neg) = scores.split()?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// ROC points `(fpr, fnr)` for the rule `score >= t`, from the strictest
/// threshold to the loosest.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = scores.split()?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut out = vec![(0.0, 1.0)];
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((fp / nn, 1.0 - tp / np));
    }
    Ok(out)
}

/// Error rate where false-accept equals false-reject, interpolated linearly
/// between neighbouring ROC points.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let pts = roc_points(scores)?;
    for k in 0..pts.len() {
        let d1 = pts[k].0 - pts[k].1;
        if d1 == 0.0 {
            return Ok(pts[k].0);
        }
        if d1 > 0.0 {
            let (f0, r0) = pts[k - 1];
            let f1 = pts[k].0;
            let d0 = f0 - r0;
            let lam = -d0 / (d1 - d0);
            return Ok(f0 + lam * (f1 - f0));
        }
    }
    Err(Error::Metric("ROC never crosses the diagonal".into()))
}

/// AUC over per-video mean scores.
pub fn video_auc(scores: &ScoreSet) -> Result<f64> {
    let mut videos: BTreeMap<&str, (f64, usize, u8)> = BTreeMap::new();
    for it in &scores.items {
        let e = videos.entry(&it.video_id).or_insert((0.0, 0, it.label));
        if e.2 != it.label {
            return Err(Error::Metric(format!("video `{}` mixes labels", it.video_id)));
        }
        e.0 += it.score;
        e.1 += 1;
    }
    let items = videos
        .into_iter()
        .map(|(v, (s, n, l))| ScoredItem {
            item_id: v.to_string(),
            video_id: v.to_string(),
            score: s / n as f64,
            label: l,
        })
        .collect();
    auc(&ScoreSet::new(items))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tag: String,
    pub frames: usize,
    pub auc: f64,
    pub eer: f64,
    pub video_auc: f64,
}

pub fn detection_metrics(tag: &str, scores: &ScoreSet) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        tag: tag.to_string(),
        frames: scores.items.len(),
        auc: auc(scores)?,
        eer: eer(scores)?,
        video_auc: video_auc(scores)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_cases() {
        let s = ScoreSet::from_pairs(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        assert_eq!(auc(&s).unwrap(), 1.0);
        assert_eq!(eer(&s).unwrap(), 0.0);
        let s = ScoreSet::from_pairs(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]);
        assert_eq!(auc(&s).unwrap(), 0.0);
        assert_eq!(eer(&s).unwrap(), 1.0);
        let s = ScoreSet::from_pairs(&[0.5; 6], &[0, 1, 0, 1, 1, 0]);
        assert_eq!(auc(&s).unwrap(), 0.5);
        assert_eq!(eer(&s).unwrap(), 0.5);
        assert!(auc(&ScoreSet::from_pairs(&[0.1, 0.2], &[1, 1])).is_err());
    }

    #[test]
    fn video_level() {
        let mk = |id: &str, v: &str, s: f64, l: u8| ScoredItem {
            item_id: id.into(),
            video_id: v.into(),
            score: s,
            label: l,
        };
        let s = ScoreSet::new(vec![
            mk("a", "f", 0.9, 1),
            mk("b", "f", 0.9, 1),
            mk("c", "r", 0.1, 0),
            mk("d", "r", 0.1, 0),
        ]);
        assert_eq!(video_auc(&s).unwrap(), 1.0);
        let bad = ScoreSet::new(vec![mk("a", "v", 0.9, 1), mk("b", "v", 0.1, 0)]);
        assert!(video_auc(&bad).is_err());
    }
}

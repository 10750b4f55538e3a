//! Feature-level mixup between adjacent anchors of one aligned quad.
//!
//! A bridged sample mixes `alpha * first + (1 - alpha) * second` for both the
//! feature and the label. Only pairs that are one rank apart in the active
//! organization can be constructed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::{AnchorKind, LabelRecord, LabelScheme, Organization};
use crate::tensor::Tensor;

pub use crate::labels::adjacency_check;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub pairs_per_quad: usize,
    /// `alpha ~ U[alpha_low, alpha_high]`.
    pub alpha_low: f64,
    pub alpha_high: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            pairs_per_quad: 3,
            alpha_low: 0.0,
            alpha_high: 1.0,
        }
    }
}

fn check_pair(pair: (AnchorKind, AnchorKind), organization: Organization) -> Result<()> {
    if adjacency_check(pair, organization) {
        Ok(())
    } else {
        Err(Error::NonAdjacentPair(format!("{} and {} under {organization:?}", pair.0, pair.1)))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("mixing ratio {alpha} outside [0, 1]")))
    }
}

/// One mixing decision: which quad in the batch, which pair, which ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgePlan {
    quad: usize,
    pair: (AnchorKind, AnchorKind),
    alpha: f64,
}

impl BridgePlan {
    pub fn new(quad: usize, pair: (AnchorKind, AnchorKind), alpha: f64, organization: Organization) -> Result<Self> {
        check_pair(pair, organization)?;
        check_alpha(alpha)?;
        Ok(Self { quad, pair, alpha })
    }

    pub fn quad(&self) -> usize {
        self.quad
    }

    pub fn pair(&self) -> (AnchorKind, AnchorKind) {
        self.pair
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Draws `pairs_per_quad` plans for each of `n_quads` quads; pairs are
/// uniform over the organization's adjacent pairs.
pub fn plan_bridges(n_quads: usize, scheme: &LabelScheme, cfg: &BridgeConfig, rng: &mut impl Rng) -> Vec<BridgePlan> {
    let pairs = scheme.adjacent_pairs();
    let mut out = Vec::with_capacity(n_quads * cfg.pairs_per_quad);
    for quad in 0..n_quads {
        for _ in 0..cfg.pairs_per_quad {
            let pair = pairs[rng.gen_range(0..pairs.len())];
            let alpha = if cfg.alpha_high > cfg.alpha_low {
                rng.gen_range(cfg.alpha_low..=cfg.alpha_high)
            } else {
                cfg.alpha_low
            };
            out.push(BridgePlan { quad, pair, alpha });
        }
    }
    out
}

/// A mixed feature with its mixed label. Fields are read-only so the
/// adjacency invariant cannot be broken after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgedSample {
    feature: Tensor,
    label: LabelRecord,
    pair: (AnchorKind, AnchorKind),
    alpha: f64,
}

impl BridgedSample {
    pub fn new(
        first: (&Tensor, &LabelRecord),
        second: (&Tensor, &LabelRecord),
        pair: (AnchorKind, AnchorKind),
        alpha: f64,
        organization: Organization,
    ) -> Result<Self> {
        check_pair(pair, organization)?;
        check_alpha(alpha)?;
        if first.0.shape() != second.0.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", first.0.shape(), second.0.shape())));
        }
        let feature = first.0.zip_map(second.0, |a, b| alpha * a + (1.0 - alpha) * b);
        Ok(Self {
            feature,
            label: LabelRecord::mix(alpha, first.1, second.1),
            pair,
            alpha,
        })
    }

    pub fn feature(&self) -> &Tensor {
        &self.feature
    }

    pub fn label(&self) -> &LabelRecord {
        &self.label
    }

    pub fn pair(&self) -> (AnchorKind, AnchorKind) {
        self.pair
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// The four anchor features of one frame, each tagged with the frame it came from.
#[derive(Clone, Debug)]
pub struct QuadFeatures {
    pub frame_ids: [String; 4],
    pub features: [Tensor; 4],
}

pub fn bridge(
    quad: &QuadFeatures,
    scheme: &LabelScheme,
    cfg: &BridgeConfig,
    rng: &mut impl Rng,
) -> Result<Vec<BridgedSample>> {
    if quad.frame_ids.iter().any(|id| *id != quad.frame_ids[0]) {
        return Err(Error::FrameMismatch(quad.frame_ids.join(", ")));
    }
    plan_bridges(1, scheme, cfg, rng)
        .into_iter()
        .map(|p| {
            let (a, b) = p.pair;
            BridgedSample::new(
                (&quad.features[a.index()], &scheme.label(a)),
                (&quad.features[b.index()], &scheme.label(b)),
                p.pair,
                p.alpha,
                scheme.organization,
            )
        })
        .collect()
}

/// Batched bridging inside the graph. `anchors[k]` holds the features of
/// anchor kind `k` for every quad, `[n_quads, ...]`. Returns the mixed
/// features `[plans.len(), ...]` and their labels `[plans.len(), width]`.
pub fn bridge_graph(g: &mut Graph, anchors: &[Var; 4], plans: &[BridgePlan], scheme: &LabelScheme) -> (Var, Tensor) {
    assert!(!plans.is_empty(), "bridge_graph needs at least one plan");
    let mut parts = Vec::with_capacity(plans.len());
    let mut labels = Vec::with_capacity(plans.len());
    for p in plans {
        let (a, b) = p.pair;
        let fa = g.gather_rows(anchors[a.index()], &[p.quad]);
        let fb = g.gather_rows(anchors[b.index()], &[p.quad]);
        let fa = g.row_scale(fa, &[p.alpha]);
        let fb = g.row_scale(fb, &[1.0 - p.alpha]);
        parts.push(g.add(fa, fb));
        let mixed = LabelRecord::mix(p.alpha, &scheme.label(a), &scheme.label(b));
        labels.push(Tensor::new(vec![mixed.as_slice().len()], mixed.as_slice().to_vec()).unwrap());
    }
    let feats = g.concat_rows(&parts);
    (feats, Tensor::stack(&labels).unwrap())
}

//! Oriented-anchor label schema.
//!
//! Every training frame contributes four anchors: real, self-blended (SBI),
//! cross-blended (CBI) and deepfake. Under the default `R2B2D` organization
//! each anchor carries a cumulative forgery-attribute triplet
//! (blending clue, identity inconsistency, generative artifact):
//!
//! | anchor   | R2B2D     | R2D2B     | Surround  |
//! |----------|-----------|-----------|-----------|
//! | Real     | (0, 0, 0) | (0, 0, 0) | (0, 0, 0) |
//! | SBI      | (1, 0, 0) | (1, 1, 0) | (1, 0, 0) |
//! | CBI      | (1, 1, 0) | (1, 1, 1) | (0, 1, 0) |
//! | Deepfake | (1, 1, 1) | (1, 0, 0) | (0, 0, 1) |
//!
//! `R2D2B` places deepfakes between real and blendfake; `Surround` puts every
//! fake kind one attribute away from real.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnchorKind {
    Real = 0,
    Sbi = 1,
    Cbi = 2,
    Deepfake = 3,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 4] = [AnchorKind::Real, AnchorKind::Sbi, AnchorKind::Cbi, AnchorKind::Deepfake];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AnchorKind::Real => "real",
            AnchorKind::Sbi => "sbi",
            AnchorKind::Cbi => "cbi",
            AnchorKind::Deepfake => "deepfake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Binary detection target: blendfake and deepfake are both fake.
    pub fn detection_label(self) -> DetectionLabel {
        DetectionLabel(u8::from(self != AnchorKind::Real))
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `0` real, `1` fake.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionLabel(pub u8);

impl DetectionLabel {
    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

/// Forgery-attribute likelihoods `(blending, identity, generative)`.
/// Hard (0/1) at anchors, real-valued after bridging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeLabel(pub [f64; 3]);

impl AttributeLabel {
    pub fn new(a0: f64, a1: f64, a2: f64) -> Self {
        Self([a0, a1, a2])
    }

    pub fn mix(alpha: f64, a: &Self, b: &Self) -> Self {
        Self(std::array::from_fn(|i| alpha * a.0[i] + (1.0 - alpha) * b.0[i]))
    }

    /// Accumulated forgery: `a0 + a1 + a2`.
    pub fn progressive_rank(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dominates(&self, other: &Self) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }
}

pub fn progressive_rank(label: &AttributeLabel) -> f64 {
    label.progressive_rank()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Three independent two-way heads.
    #[default]
    TripletBinary,
    /// One head emitting three sigmoid outputs.
    MultiLabel,
    /// One four-way softmax head over anchor kinds.
    MultiClass,
}

impl StrategyKind {
    /// Width of the attribute prediction vector.
    pub fn prediction_width(self) -> usize {
        match self {
            StrategyKind::TripletBinary | StrategyKind::MultiLabel => 3,
            StrategyKind::MultiClass => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organization {
    /// Real → blendfake → deepfake.
    #[default]
    R2B2D,
    /// Real → deepfake → blendfake.
    R2D2B,
    /// Every fake kind equidistant from real.
    Surround,
}

/// Attribute label of `kind` under `organization`.
pub fn organization_variant(kind: AnchorKind, organization: Organization) -> AttributeLabel {
    use AnchorKind::*;
    let bits = match (organization, kind) {
        (_, Real) => [0.0, 0.0, 0.0],
        (Organization::R2B2D, Sbi) => [1.0, 0.0, 0.0],
        (Organization::R2B2D, Cbi) => [1.0, 1.0, 0.0],
        (Organization::R2B2D, Deepfake) => [1.0, 1.0, 1.0],
        (Organization::R2D2B, Deepfake) => [1.0, 0.0, 0.0],
        (Organization::R2D2B, Sbi) => [1.0, 1.0, 0.0],
        (Organization::R2D2B, Cbi) => [1.0, 1.0, 1.0],
        (Organization::Surround, Sbi) => [1.0, 0.0, 0.0],
        (Organization::Surround, Cbi) => [0.0, 1.0, 0.0],
        (Organization::Surround, Deepfake) => [0.0, 0.0, 1.0],
    };
    AttributeLabel(bits)
}

/// Class index permutation for the multi-class strategy: anchor `k` is
/// encoded at position `perm[k]`. Any permutation is an equally valid
/// encoding since classes carry no order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPermutation(pub [usize; 4]);

impl Default for ClassPermutation {
    fn default() -> Self {
        Self([0, 1, 2, 3])
    }
}

impl ClassPermutation {
    pub fn new(perm: [usize; 4]) -> Option<Self> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p >= 4 || seen[p] {
                return None;
            }
            seen[p] = true;
        }
        Some(Self(perm))
    }
}

/// Target record for one anchor under a given strategy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelRecord {
    Attributes(AttributeLabel),
    OneHot([f64; 4]),
}

impl LabelRecord {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            LabelRecord::Attributes(a) => &a.0,
            LabelRecord::OneHot(v) => v,
        }
    }

    pub fn mix(alpha: f64, a: &Self, b: &Self) -> Self {
        match (a, b) {
            (LabelRecord::Attributes(x), LabelRecord::Attributes(y)) => {
                LabelRecord::Attributes(AttributeLabel::mix(alpha, x, y))
            }
            (LabelRecord::OneHot(x), LabelRecord::OneHot(y)) => {
                LabelRecord::OneHot(std::array::from_fn(|i| alpha * x[i] + (1.0 - alpha) * y[i]))
            }
            _ => panic!("cannot mix labels of different strategies"),
        }
    }
}

/// Resolves anchor labels for one strategy/organization/permutation choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub strategy: StrategyKind,
    pub organization: Organization,
    #[serde(default)]
    pub class_permutation: ClassPermutation,
}

impl LabelScheme {
    pub fn new(strategy: StrategyKind, organization: Organization) -> Self {
        Self {
            strategy,
            organization,
            class_permutation: ClassPermutation::default(),
        }
    }

    pub fn label(&self, kind: AnchorKind) -> LabelRecord {
        match self.strategy {
            StrategyKind::TripletBinary | StrategyKind::MultiLabel => {
                LabelRecord::Attributes(organization_variant(kind, self.organization))
            }
            StrategyKind::MultiClass => {
                let mut v = [0.0; 4];
                v[self.class_permutation.0[kind.index()]] = 1.0;
                LabelRecord::OneHot(v)
            }
        }
    }

    /// Attribute-space rank of `kind` under the active organization. Used for
    /// adjacency regardless of strategy.
    pub fn rank(&self, kind: AnchorKind) -> f64 {
        organization_variant(kind, self.organization).progressive_rank()
    }

    /// `true` iff the two anchors are one rank apart.
    pub fn adjacent(&self, a: AnchorKind, b: AnchorKind) -> bool {
        ((self.rank(a) - self.rank(b)).abs() - 1.0).abs() < 1e-12
    }

    /// Ordered adjacent pairs `(less fake, more fake)`, sorted by rank then kind.
    pub fn adjacent_pairs(&self) -> Vec<(AnchorKind, AnchorKind)> {
        let mut out = Vec::new();
        for a in AnchorKind::ALL {
            for b in AnchorKind::ALL {
                if self.adjacent(a, b) && self.rank(a) < self.rank(b) {
                    out.push((a, b));
                }
            }
        }
        out.sort_by(|x, y| {
            self.rank(x.0)
                .total_cmp(&self.rank(y.0))
                .then(self.rank(x.1).total_cmp(&self.rank(y.1)))
                .then(x.cmp(y))
        });
        out
    }

    /// Full label table, serialized into run metadata and checkpoints.
    pub fn table(&self) -> LabelTable {
        LabelTable {
            scheme: *self,
            rows: AnchorKind::ALL
                .into_iter()
                .map(|k| (k, self.label(k).as_slice().to_vec()))
                .collect(),
        }
    }
}

/// Label for `kind` under the default organization.
pub fn label_for(kind: AnchorKind, strategy: StrategyKind) -> LabelRecord {
    LabelScheme::new(strategy, Organization::R2B2D).label(kind)
}

pub fn adjacency_check(pair: (AnchorKind, AnchorKind), organization: Organization) -> bool {
    LabelScheme::new(StrategyKind::TripletBinary, organization).adjacent(pair.0, pair.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub scheme: LabelScheme,
    pub rows: Vec<(AnchorKind, Vec<f64>)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use AnchorKind::*;

    #[test]
    fn cumulative_table() {
        let got: Vec<_> = AnchorKind::ALL
            .iter()
            .map(|&k| label_for(k, StrategyKind::TripletBinary))
            .collect();
        let want = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
        for (g, w) in got.iter().zip(want) {
            assert_eq!(g.as_slice(), &w);
        }
        assert_eq!(label_for(Sbi, StrategyKind::MultiClass), LabelRecord::OneHot([0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn ranks_strictly_increase_and_dominate() {
        let labels: Vec<_> = AnchorKind::ALL
            .iter()
            .map(|&k| organization_variant(k, Organization::R2B2D))
            .collect();
        let ranks: Vec<f64> = labels.iter().map(progressive_rank).collect();
        assert_eq!(ranks, vec![0.0, 1.0, 2.0, 3.0]);
        for w in labels.windows(2) {
            assert!(w[1].dominates(&w[0]));
        }
        assert_eq!(progressive_rank(&AttributeLabel::new(0.5, 0.0, 0.0)), 0.5);
    }

    #[test]
    fn alternative_organizations() {
        assert_eq!(organization_variant(Deepfake, Organization::R2D2B), AttributeLabel::new(1.0, 0.0, 0.0));
        let r = |k| organization_variant(k, Organization::R2D2B).progressive_rank();
        assert!(r(Real) < r(Deepfake) && r(Deepfake) < r(Sbi) && r(Sbi) < r(Cbi));
        let s = |k| organization_variant(k, Organization::Surround).progressive_rank();
        assert_eq!(s(Sbi), 1.0);
        assert_eq!(s(Cbi), s(Sbi));
        assert_eq!(s(Deepfake), s(Sbi));
    }

    #[test]
    fn adjacency() {
        let o = Organization::R2B2D;
        assert!(adjacency_check((Real, Sbi), o));
        assert!(!adjacency_check((Real, Cbi), o));
        assert!(!adjacency_check((Sbi, Deepfake), o));
        let scheme = LabelScheme::new(StrategyKind::TripletBinary, o);
        assert_eq!(scheme.adjacent_pairs(), vec![(Real, Sbi), (Sbi, Cbi), (Cbi, Deepfake)]);
        let surround = LabelScheme::new(StrategyKind::TripletBinary, Organization::Surround);
        assert_eq!(surround.adjacent_pairs(), vec![(Real, Sbi), (Real, Cbi), (Real, Deepfake)]);
        let r2d2b = LabelScheme::new(StrategyKind::TripletBinary, Organization::R2D2B);
        assert_eq!(r2d2b.adjacent_pairs(), vec![(Real, Deepfake), (Deepfake, Sbi), (Sbi, Cbi)]);
    }

    #[test]
    fn detection_labels() {
        let fakes = AnchorKind::ALL.iter().filter(|k| k.detection_label().0 == 1).count();
        assert_eq!(fakes, 3);
        assert_eq!(Real.detection_label(), DetectionLabel(0));
    }

    #[test]
    fn multiclass_accepts_any_permutation() {
        assert!(ClassPermutation::new([0, 0, 1, 2]).is_none());
        let perm = ClassPermutation::new([3, 1, 0, 2]).unwrap();
        let scheme = LabelScheme {
            strategy: StrategyKind::MultiClass,
            organization: Organization::R2B2D,
            class_permutation: perm,
        };
        assert_eq!(scheme.label(Real), LabelRecord::OneHot([0.0, 0.0, 0.0, 1.0]));
        let mut seen = [0; 4];
        for k in AnchorKind::ALL {
            let v = scheme.label(k);
            let pos = v.as_slice().iter().position(|&x| x == 1.0).unwrap();
            seen[pos] += 1;
        }
        assert_eq!(seen, [1, 1, 1, 1]);
    }
}

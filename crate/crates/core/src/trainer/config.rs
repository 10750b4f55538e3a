//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! variant = "full"            # full | bf_only | df_only | vht
//! strategy = "triplet_binary" # triplet_binary | multi_label | multi_class
//! organization = "r2b2d"      # r2b2d | r2d2b | surround
//! epochs = 20
//! batch_quads = 6
//! learning_rate = 2e-4
//! warmup_epochs = 2
//! input_size = 256
//! parallel = false
//!
//! [weights]
//! beta = 1.0
//! gamma = 10.0
//!
//! [backbone]
//! name = "ref-cnn"
//! input_size = 256
//! widths = [16, 32, 64, 64]
//! feature_channels = 64
//! toy_mode = false
//!
//! [bridge]
//! pairs_per_quad = 3
//! alpha_low = 0.0
//! alpha_high = 1.0
//!
//! [augment]
//! enabled = true
//!
//! [data]
//! manifest = "desk/manifest.json"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::AugmentConfig;
use crate::blendfake::{BlendConfig, CbiFailurePolicy};
use crate::bridging::BridgeConfig;
use crate::error::{Error, Result};
use crate::labels::{AnchorKind, ClassPermutation, LabelScheme, Organization, StrategyKind};
use crate::losses::LossWeights;
use crate::model::{BackboneSpec, ModelSpec};
use crate::nn::AdamConfig;

/// Training recipe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All four anchors with attribute heads, bridging and transition loss.
    #[default]
    Full,
    /// Real, SBI and CBI with the detection loss only.
    BfOnly,
    /// Real and deepfake with the detection loss only.
    DfOnly,
    /// All four anchors with the detection loss only.
    Vht,
}

impl Variant {
    pub fn anchors(self) -> &'static [AnchorKind] {
        use AnchorKind::*;
        match self {
            Variant::Full | Variant::Vht => &[Real, Sbi, Cbi, Deepfake],
            Variant::BfOnly => &[Real, Sbi, Cbi],
            Variant::DfOnly => &[Real, Deepfake],
        }
    }

    /// Whether the attribute heads, bridging and transition mapper are used.
    pub fn uses_heads(self) -> bool {
        self == Variant::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BfOnly => "bf_only",
            Variant::DfOnly => "df_only",
            Variant::Vht => "vht",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Frame manifest; quads are synthesized from it at start-up.
    pub manifest: Option<PathBuf>,
    /// Pre-built quads written by `synth`; takes precedence over `manifest`.
    pub quad_manifest: Option<PathBuf>,
    pub blend: BlendConfig,
    pub cbi_failure_policy: CbiFailurePolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamBetas {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamBetas {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub strategy: StrategyKind,
    pub organization: Organization,
    pub class_permutation: ClassPermutation,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub adam: AdamBetas,
    pub epochs: usize,
    pub batch_quads: usize,
    pub input_size: usize,
    pub warmup_epochs: usize,
    pub backbone: BackboneSpec,
    pub bridge: BridgeConfig,
    pub augment: AugmentConfig,
    /// Allow multi-threaded kernels. Off means a single worker thread.
    pub parallel: bool,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Full,
            strategy: StrategyKind::TripletBinary,
            organization: Organization::R2B2D,
            class_permutation: ClassPermutation::default(),
            weights: LossWeights::default(),
            learning_rate: 2e-4,
            adam: AdamBetas::default(),
            epochs: 20,
            batch_quads: 6,
            input_size: 256,
            warmup_epochs: 2,
            backbone: BackboneSpec::default(),
            bridge: BridgeConfig::default(),
            augment: AugmentConfig::default(),
            parallel: false,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults: 32-pixel inputs, the small reference encoder and
    /// a higher learning rate, since it trains from scratch.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            input_size: 32,
            backbone: BackboneSpec::desk(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.input_size != self.backbone.input_size {
            return Err(Error::Config(format!(
                "input_size {} differs from backbone input {}",
                self.input_size, self.backbone.input_size
            )));
        }
        if self.batch_quads == 0 {
            return Err(Error::Config("batch_quads must be positive".into()));
        }
        if self.bridge.pairs_per_quad == 0 {
            return Err(Error::Config("bridge.pairs_per_quad must be positive".into()));
        }
        let b = &self.bridge;
        if !(0.0..=1.0).contains(&b.alpha_low) || !(0.0..=1.0).contains(&b.alpha_high) || b.alpha_low > b.alpha_high {
            return Err(Error::Config(format!("bad alpha range [{}, {}]", b.alpha_low, b.alpha_high)));
        }
        if ClassPermutation::new(self.class_permutation.0).is_none() {
            return Err(Error::Config(format!("{:?} is not a permutation", self.class_permutation.0)));
        }
        if self.weights.beta < 0.0 || self.weights.gamma < 0.0 || self.learning_rate < 0.0 {
            return Err(Error::Config("loss weights and learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn scheme(&self) -> LabelScheme {
        LabelScheme {
            strategy: self.strategy,
            organization: self.organization,
            class_permutation: self.class_permutation,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            strategy: self.strategy,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
        }
    }

    pub fn images_per_batch(&self) -> usize {
        self.variant.anchors().len() * self.batch_quads
    }

    /// SHA-256 of everything that shapes the optimization trajectory. The
    /// epoch budget, data paths and the threading flag are left out so a run
    /// can be extended or moved.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.parallel = false;
        c.data.manifest = None;
        c.data.quad_manifest = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.images_per_batch(), 24);
        let partial = RunConfig::from_toml("variant = \"vht\"\nepochs = 3\n").unwrap();
        assert_eq!(partial.variant, Variant::Vht);
        assert_eq!(partial.learning_rate, 2e-4);
        assert!(RunConfig::from_toml("input_size = 64\n").is_err());
    }

    #[test]
    fn fingerprint_ignores_epoch_budget() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.epochs = 99;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.strategy = StrategyKind::MultiClass;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}

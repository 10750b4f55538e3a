//! Detector network: encoder, attribute classifier, attention projector,
//! final classifier and the noise-conditioned transition mapper.
//!
//! All tensors are NHWC. Images enter as `[n, s, s, 3]` with pixels scaled to
//! `[-0.5, 0.5]`.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::StrategyKind;
use crate::nn::{Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Architecture of the reference encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub name: String,
    pub input_size: usize,
    /// Channels of each stride-2 3x3 stage.
    pub widths: Vec<usize>,
    pub feature_channels: usize,
    /// Routes the features through a 2-channel 1x1 bottleneck whose pooled
    /// output is the analysis embedding. The feature map keeps its shape.
    pub toy_mode: bool,
    /// Standardize each sample's feature map to zero mean and unit variance.
    /// Keeps the transition loss from shrinking features toward a constant.
    pub standardize: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            name: "ref-cnn".into(),
            input_size: 256,
            widths: vec![16, 32, 64, 64],
            feature_channels: 64,
            toy_mode: false,
            standardize: true,
        }
    }
}

impl BackboneSpec {
    /// Small encoder for 32x32 desk images.
    pub fn desk() -> Self {
        Self {
            name: "ref-cnn".into(),
            input_size: 32,
            widths: vec![8, 16],
            feature_channels: 16,
            toy_mode: false,
            standardize: true,
        }
    }

    pub fn toy(mut self) -> Self {
        self.toy_mode = true;
        self
    }

    /// `(h, w, c)` of the feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let mut s = self.input_size;
        for _ in &self.widths {
            s = (s + 2 - 3) / 2 + 1;
        }
        (s, s, self.feature_channels)
    }

    pub fn embedding_dim(&self) -> usize {
        if self.toy_mode {
            2
        } else {
            self.feature_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.widths.is_empty() || self.feature_channels == 0 {
            return Err(Error::Config(format!("invalid backbone {self:?}")));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("zero-width backbone stage".into()));
        }
        Ok(())
    }
}

/// Output of an encoder: the feature map and the analysis embedding.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub feature: Var,
    pub embedding: Var,
}

/// Anything that maps `[n, s, s, 3]` images to `[n, h, w, c]` features.
pub trait Encoder: Send + Sync {
    fn spec(&self) -> &BackboneSpec;
    fn encode(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Encoded;
}

#[derive(Clone, Debug)]
pub struct RefCnn {
    spec: BackboneSpec,
    stages: Vec<Conv2d>,
    out: Conv2d,
    bottleneck: Option<(Conv2d, Conv2d)>,
}

impl RefCnn {
    pub fn new(spec: &BackboneSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in spec.widths.iter().enumerate() {
            stages.push(Conv2d::new(store, rng, &format!("enc.stage{i}"), cin, w, 3, 2));
            cin = w;
        }
        let c = spec.feature_channels;
        let out = Conv2d::new(store, rng, "enc.out", cin, c, 1, 1);
        let bottleneck = spec.toy_mode.then(|| {
            (
                Conv2d::new(store, rng, "enc.tap", c, 2, 1, 1),
                Conv2d::new(store, rng, "enc.expand", 2, c, 1, 1),
            )
        });
        Self {
            spec: spec.clone(),
            stages,
            out,
            bottleneck,
        }
    }
}

impl Encoder for RefCnn {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Encoded {
        let mut x = images;
        for s in &self.stages {
            let y = s.forward(g, store, x);
            x = g.silu(y);
        }
        let f = self.out.forward(g, store, x);
        let (feature, embedding) = match &self.bottleneck {
            None => (f, None),
            Some((tap, expand)) => {
                let t = tap.forward(g, store, f);
                (expand.forward(g, store, t), Some(g.global_avg_pool(t)))
            }
        };
        let feature = if self.spec.standardize {
            g.row_standardize(feature, 1e-5)
        } else {
            feature
        };
        let embedding = embedding.unwrap_or_else(|| g.global_avg_pool(feature));
        Encoded { feature, embedding }
    }
}

const HEAD_HIDDEN: usize = 16;

#[derive(Clone, Debug)]
struct Mlp {
    a: Linear,
    b: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: Linear::new(store, rng, &format!("{name}.fc1"), cin, HEAD_HIDDEN),
            b: Linear::new(store, rng, &format!("{name}.fc2"), HEAD_HIDDEN, cout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.a.forward(g, store, x);
        let h = g.silu(h);
        self.b.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
enum AttributeHeads {
    /// Three independent two-way heads.
    Triplet([Mlp; 3]),
    MultiLabel(Mlp),
    MultiClass(Mlp),
}

#[derive(Clone, Debug)]
struct Projector {
    expand: Linear,
    refine: Conv2d,
}

#[derive(Clone, Debug)]
struct TransitionMapper {
    merge: Conv2d,
    out: Conv2d,
}

/// Everything needed to rebuild an [`OprModel`] with identical parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub strategy: StrategyKind,
}

pub struct OprModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    encoder: Box<dyn Encoder>,
    heads: AttributeHeads,
    projector: Projector,
    classifier: Linear,
    mapper: TransitionMapper,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub feature: Var,
    pub embedding: Var,
    pub attributes: Option<Var>,
    pub attention: Option<Var>,
    pub score: Var,
}

impl OprModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = RefCnn::new(&spec.backbone, &mut store, &mut rng);
        Ok(Self::with_encoder(spec, Box::new(encoder), store, &mut rng))
    }

    /// Builds the heads around an externally constructed encoder whose
    /// parameters already live in `store`.
    pub fn with_encoder(spec: ModelSpec, encoder: Box<dyn Encoder>, mut store: ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (_, _, c) = spec.backbone.feature_shape();
        let heads = match spec.strategy {
            StrategyKind::TripletBinary => AttributeHeads::Triplet(std::array::from_fn(|i| {
                Mlp::new(&mut store, rng, &format!("ca.head{i}"), c, 2)
            })),
            StrategyKind::MultiLabel => AttributeHeads::MultiLabel(Mlp::new(&mut store, rng, "ca.multilabel", c, 3)),
            StrategyKind::MultiClass => AttributeHeads::MultiClass(Mlp::new(&mut store, rng, "ca.multiclass", c, 4)),
        };
        let k = spec.strategy.prediction_width();
        let projector = Projector {
            expand: Linear::new(&mut store, rng, "proj.expand", k, c),
            refine: Conv2d::new(&mut store, rng, "proj.refine", c, c, 1, 1),
        };
        let classifier = Linear::new(&mut store, rng, "cf.fc", c, 1);
        let mapper = TransitionMapper {
            merge: Conv2d::new(&mut store, rng, "t.merge", 2 * c, c, 3, 1),
            out: Conv2d::new(&mut store, rng, "t.out", c, c, 3, 1),
        };
        Self {
            spec,
            store,
            encoder,
            heads,
            projector,
            classifier,
            mapper,
        }
    }

    pub fn backbone(&self) -> &BackboneSpec {
        self.encoder.spec()
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.backbone().feature_shape()
    }

    /// Parameter ids of the named head group, e.g. `"ca.head2"` or `"t."`.
    pub fn param_group(&self, prefix: &str) -> Vec<ParamId> {
        self.store.ids_with_prefix(prefix).collect()
    }

    pub fn encode(&self, g: &mut Graph, images: Var) -> Result<Encoded> {
        let s = self.backbone().input_size;
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return Err(Error::Shape(format!("images {shape:?}, expected [n, {s}, {s}, 3]")));
        }
        Ok(self.encoder.encode(g, &self.store, images))
    }

    fn check_feature(&self, g: &Graph, f: Var) -> Result<()> {
        let (h, w, c) = self.feature_shape();
        let s = g.shape(f);
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::Shape(format!("feature {s:?}, expected [n, {h}, {w}, {c}]")));
        }
        Ok(())
    }

    /// `[n, h, w, c] -> [n, k]` attribute probabilities.
    pub fn classify_attributes(&self, g: &mut Graph, feature: Var) -> Result<Var> {
        self.check_feature(g, feature)?;
        let pooled = g.global_avg_pool(feature);
        Ok(match &self.heads {
            AttributeHeads::Triplet(heads) => {
                let parts: Vec<Var> = heads
                    .iter()
                    .map(|h| {
                        let logits = h.forward(g, &self.store, pooled);
                        let p = g.softmax(logits);
                        g.slice_last(p, 1, 1)
                    })
                    .collect();
                g.concat_last(&parts)
            }
            AttributeHeads::MultiLabel(h) => {
                let logits = h.forward(g, &self.store, pooled);
                g.sigmoid(logits)
            }
            AttributeHeads::MultiClass(h) => {
                let logits = h.forward(g, &self.store, pooled);
                g.softmax(logits)
            }
        })
    }

    /// `[n, k] -> [n, h, w, c]` attention in `(0, 1)`.
    pub fn project_attention(&self, g: &mut Graph, attributes: Var) -> Result<Var> {
        let k = self.spec.strategy.prediction_width();
        let s = g.shape(attributes);
        if s.len() != 2 || s[1] != k {
            return Err(Error::Shape(format!("attributes {s:?}, expected [n, {k}]")));
        }
        let (h, w, _) = self.feature_shape();
        let e = self.projector.expand.forward(g, &self.store, attributes);
        let grid = g.broadcast_spatial(e, h, w);
        let r = self.projector.refine.forward(g, &self.store, grid);
        Ok(g.sigmoid(r))
    }

    /// `y = C_f(F * M)`: pooled, linear, sigmoid. `[n, 1]`.
    pub fn detect(&self, g: &mut Graph, feature: Var, attention: Var) -> Result<Var> {
        self.check_feature(g, feature)?;
        if g.shape(feature) != g.shape(attention) {
            return Err(Error::Shape(format!(
                "attention {:?} vs feature {:?}",
                g.shape(attention),
                g.shape(feature)
            )));
        }
        let gated = g.mul(feature, attention);
        Ok(self.classify_final(g, gated))
    }

    /// Final classifier on raw features (attention fixed to one).
    pub fn detect_plain(&self, g: &mut Graph, feature: Var) -> Result<Var> {
        self.check_feature(g, feature)?;
        Ok(self.classify_final(g, feature))
    }

    fn classify_final(&self, g: &mut Graph, x: Var) -> Var {
        let pooled = g.global_avg_pool(x);
        let logit = self.classifier.forward(g, &self.store, pooled);
        g.sigmoid(logit)
    }

    /// `T(N, F)`: concat on channels, 3x3 conv, SiLU, 3x3 conv.
    pub fn transition(&self, g: &mut Graph, noise: Var, feature: Var) -> Result<Var> {
        self.check_feature(g, feature)?;
        if g.shape(noise) != g.shape(feature) {
            return Err(Error::Shape(format!("noise {:?} vs feature {:?}", g.shape(noise), g.shape(feature))));
        }
        Ok(self.transition_unchecked(g, noise, feature))
    }

    pub(crate) fn transition_unchecked(&self, g: &mut Graph, noise: Var, feature: Var) -> Var {
        let x = g.concat_last(&[feature, noise]);
        let h = self.mapper.merge.forward(g, &self.store, x);
        let h = g.silu(h);
        self.mapper.out.forward(g, &self.store, h)
    }

    /// Full pass. With `heads = false` the attention is fixed to one and no
    /// attribute prediction is made.
    pub fn forward(&self, g: &mut Graph, images: Var, heads: bool) -> Result<Forward> {
        let enc = self.encode(g, images)?;
        if !heads {
            let score = self.detect_plain(g, enc.feature)?;
            return Ok(Forward {
                feature: enc.feature,
                embedding: enc.embedding,
                attributes: None,
                attention: None,
                score,
            });
        }
        let a = self.classify_attributes(g, enc.feature)?;
        let m = self.project_attention(g, a)?;
        let score = self.detect(g, enc.feature, m)?;
        Ok(Forward {
            feature: enc.feature,
            embedding: enc.embedding,
            attributes: Some(a),
            attention: Some(m),
            score,
        })
    }

    /// Detection scores for a set of images, evaluated in chunks.
    pub fn predict(&self, images: &[&RgbImage], heads: bool, chunk: usize) -> Result<Vec<f64>> {
        Ok(self.infer(images, heads, chunk)?.0)
    }

    /// Scores and analysis embeddings.
    pub fn infer(&self, images: &[&RgbImage], heads: bool, chunk: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut scores = Vec::with_capacity(images.len());
        let mut embeddings = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let x = g.constant(images_to_tensor(part, self.backbone().input_size)?);
            let fw = self.forward(&mut g, x, heads)?;
            scores.extend_from_slice(g.value(fw.score).data());
            let e = g.value(fw.embedding);
            embeddings.extend((0..e.rows()).map(|i| e.row(i).to_vec()));
        }
        Ok((scores, embeddings))
    }
}

/// Stacks images into `[n, size, size, 3]` with pixels mapped to `[-0.5, 0.5]`.
pub fn images_to_tensor(images: &[&RgbImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        if img.width() as usize != size || img.height() as usize != size {
            return Err(Error::Shape(format!(
                "image {}x{}, expected {size}x{size}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.as_raw().iter().map(|&v| f64::from(v) / 255.0 - 0.5));
    }
    Tensor::new(vec![images.len(), size, size, 3], data)
}

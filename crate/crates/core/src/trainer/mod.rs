//! Hybrid training over aligned quads.
//!
//! One step on a batch of quads:
//! encode every anchor image, then (after warm-up) mix adjacent anchor
//! features, then score the oriented loss on anchors and mixtures, the
//! transition loss on consecutive anchors and the detection loss on anchors,
//! and take one Adam step on `L_d + beta L_o + gamma L_t`.
//!
//! Variants other than `Full` train the detector on their anchor subset with
//! the detection loss alone and attention fixed to one.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod logging;

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::blendfake::AlignedQuad;
use crate::bridging::{bridge_graph, plan_bridges};
use crate::error::{Error, Result};
use crate::eval::AnalysisItem;
use crate::ingestion::{load_frames, load_quad_manifest, split_quads, Split};

use crate::labels::{AnchorKind, LabelRecord, LabelScheme};
use crate::losses::{
    detection_loss_graph, oriented_loss_graph, overall_loss_graph, transition_loss_graph, LossReport,
};
use crate::model::{images_to_tensor, OprModel};
use crate::nn::Adam;
use crate::tensor::Tensor;

pub use augment::{augment_quad, AugmentConfig, AugmentParams};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{DataConfig, RunConfig, Variant};
pub use logging::{read_step_log, EpochSummary, RunLogger, StepLog};

/// The anchors of one quad that a variant trains on, with their targets.
#[derive(Clone, Debug)]
pub struct VariantBatch<'a> {
    pub kinds: Vec<AnchorKind>,
    pub images: Vec<&'a RgbImage>,
    pub detection: Vec<f64>,
    /// Attribute targets; `None` when the variant has no attribute heads.
    pub attributes: Option<Vec<LabelRecord>>,
}

pub fn assemble_variant_batch<'a>(quad: &'a AlignedQuad, variant: Variant, scheme: &LabelScheme) -> VariantBatch<'a> {
    let kinds = variant.anchors().to_vec();
    VariantBatch {
        images: kinds.iter().map(|&k| quad.image(k)).collect(),
        detection: kinds.iter().map(|k| k.detection_label().as_f64()).collect(),
        attributes: variant
            .uses_heads()
            .then(|| kinds.iter().map(|&k| scheme.label(k)).collect()),
        kinds,
    }
}

/// Mutable training state: model parameters, optimizer, RNG and counters.
pub struct Trainer {
    pub config: RunConfig,
    pub model: OprModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
    pool: rayon::ThreadPool,
}

fn thread_pool(parallel: bool) -> Result<rayon::ThreadPool> {
    let threads = if parallel { 0 } else { 1 };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = OprModel::new(config.model_spec(), config.seed)?;
        let adam = Adam::new(config.adam_config(), &model.store);
        // Separate stream from parameter initialization.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
        Ok(Self {
            pool: thread_pool(config.parallel)?,
            config,
            model,
            adam,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn scheme(&self) -> LabelScheme {
        self.config.scheme()
    }

    pub fn bridging_active(&self) -> bool {
        self.config.variant.uses_heads() && self.epoch >= self.config.warmup_epochs
    }

    /// One pass over `quads` in a freshly shuffled order.
    pub fn train_epoch(&mut self, quads: &[AlignedQuad]) -> Result<Vec<StepLog>> {
        if quads.is_empty() {
            return Err(Error::Config("no training quads".into()));
        }
        let pool = std::mem::replace(&mut self.pool, thread_pool(self.config.parallel)?);
        let out = pool.install(|| self.train_epoch_inner(quads));
        self.pool = pool;
        out
    }

    fn train_epoch_inner(&mut self, quads: &[AlignedQuad]) -> Result<Vec<StepLog>> {
        let mut order: Vec<usize> = (0..quads.len()).collect();
        order.shuffle(&mut self.rng);
        let bridging = self.bridging_active();
        let mut logs = Vec::new();
        for chunk in order.chunks(self.config.batch_quads) {
            let batch: Vec<&AlignedQuad> = chunk.iter().map(|&i| &quads[i]).collect();
            let (report, bridged) = self.train_step(&batch, bridging)?;
            logs.push(StepLog {
                epoch: self.epoch,
                step: self.step,
                bridged,
                report,
            });
            self.step += 1;
        }
        self.epoch += 1;
        Ok(logs)
    }

    fn train_step(&mut self, batch: &[&AlignedQuad], bridging: bool) -> Result<(LossReport, usize)> {
        let cfg = &self.config;
        let scheme = cfg.scheme();
        let variant = cfg.variant;
        let b = batch.len();

        let mut augmented = Vec::with_capacity(b);
        for q in batch {
            augmented.push(augment_quad(&q.images, &cfg.augment, &mut self.rng)?);
        }
        // Kind-major layout: rows k*b..(k+1)*b hold anchor kind k.
        let kinds = variant.anchors();
        let mut images: Vec<&RgbImage> = Vec::with_capacity(kinds.len() * b);
        let mut detection = Vec::with_capacity(kinds.len() * b);
        for &k in kinds {
            for a in &augmented {
                images.push(&a[k.index()]);
                detection.push(k.detection_label().as_f64());
            }
        }

        let model = &self.model;
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&images, cfg.input_size)?);
        let fw = model.forward(&mut g, x, variant.uses_heads())?;
        let l_d = detection_loss_graph(&mut g, fw.score, &detection)?;

        let mut l_o = None;
        let mut l_t = None;
        let mut bridged = 0;
        if let Some(attrs) = fw.attributes {
            let block = |g: &mut Graph, k: usize| -> Var {
                let idx: Vec<usize> = (k * b..(k + 1) * b).collect();
                g.gather_rows(fw.feature, &idx)
            };
            let blocks: Vec<Var> = (0..4).map(|k| block(&mut g, k)).collect();
            let anchors = [blocks[0], blocks[1], blocks[2], blocks[3]];

            let mut targets: Vec<Tensor> = Vec::with_capacity(4 * b);
            for &k in kinds {
                let l = scheme.label(k);
                for _ in 0..b {
                    targets.push(Tensor::new(vec![l.as_slice().len()], l.as_slice().to_vec())?);
                }
            }
            let mut preds = attrs;
            let mut target = Tensor::stack(&targets)?;
            if bridging {
                let plans = plan_bridges(b, &scheme, &cfg.bridge, &mut self.rng);
                let (mixed, mixed_labels) = bridge_graph(&mut g, &anchors, &plans, &scheme);
                let mixed_preds = model.classify_attributes(&mut g, mixed)?;
                preds = g.concat_rows(&[preds, mixed_preds]);
                let stacked = [&target, &mixed_labels];
                target = Tensor::concat_rows(&stacked)?;
                bridged = plans.len();
            }
            l_o = Some(oriented_loss_graph(&mut g, preds, &target, cfg.strategy)?);

            let pairs: Vec<(Var, Var)> = scheme
                .adjacent_pairs()
                .into_iter()
                .map(|(a, c)| (anchors[a.index()], anchors[c.index()]))
                .collect();
            l_t = Some(transition_loss_graph(&mut g, &pairs, &mut self.rng, |g, n, f| {
                model.transition_unchecked(g, n, f)
            })?);
        }

        let total = overall_loss_graph(&mut g, l_d, l_o, l_t, &cfg.weights);
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let report = LossReport {
            l_d: g.value(l_d).item(),
            l_o: value(l_o),
            l_t: value(l_t),
            l_overall: g.value(total).item(),
        };
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step as usize,
                frames: batch.iter().map(|q| q.frame_id.clone()).collect(),
            });
        }
        let grads = g.backward(total);
        let grads = model.store.gradients(&g, &grads);
        drop(g);
        self.adam.step(&mut self.model.store, &grads, &|_| false);
        Ok((report, bridged))
    }

    /// Trains until `config.epochs` epochs have run, logging as it goes and
    /// optionally checkpointing after every epoch.
    pub fn fit(
        &mut self,
        quads: &[AlignedQuad],
        mut logger: Option<&mut RunLogger>,
        checkpoint: Option<&Path>,
    ) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            let logs = self.train_epoch(quads)?;
            let summary = EpochSummary::from_steps(epoch, &logs);
            if let Some(l) = logger.as_deref_mut() {
                for s in &logs {
                    l.log_step(s)?;
                }
                l.log_epoch(&summary)?;
            }
            if let Some(p) = checkpoint {
                self.checkpoint().save(p)?;
            }
            out.push(summary);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.spec.clone(),
            label_table: self.scheme().table(),
            config_hash: self.config.fingerprint(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.model.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        }
    }

    /// Rebuilds the trainer from a checkpoint, refusing incompatible configs.
    pub fn restore(ckpt: Checkpoint, config: RunConfig) -> Result<Self> {
        config.validate()?;
        ckpt.check_compatible(&config)?;
        if ckpt.label_table != config.scheme().table() {
            return Err(Error::ConfigMismatch("label tables differ".into()));
        }
        let mut t = Self::new(config)?;
        load_params(&mut t.model, ckpt.params)?;
        t.adam = ckpt.adam;
        t.rng = ckpt.rng;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn restore_from(path: &Path, config: RunConfig) -> Result<Self> {
        Self::restore(Checkpoint::load(path)?, config)
    }
}

/// Replaces the model parameters after checking names and shapes agree.
pub fn load_params(model: &mut OprModel, params: crate::nn::ParamStore) -> Result<()> {
    if params.len() != model.store.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} parameters, model {}",
            params.len(),
            model.store.len()
        )));
    }
    for id in model.store.ids() {
        if params.name(id) != model.store.name(id) || params.get(id).shape() != model.store.get(id).shape() {
            return Err(Error::Corrupt(format!("parameter `{}` does not match", model.store.name(id))));
        }
    }
    model.store = params;
    Ok(())
}

/// Model rebuilt from a checkpoint for evaluation.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<OprModel> {
    let mut m = OprModel::new(ckpt.model.clone(), ckpt.config.seed)?;
    load_params(&mut m, ckpt.params.clone())?;
    Ok(m)
}

/// Training quads named by the run's data section: a pre-built quad manifest
/// if given, else the training split of a frame manifest.
pub fn training_quads(config: &RunConfig) -> Result<Vec<AlignedQuad>> {
    let data = &config.data;
    if let Some(path) = &data.quad_manifest {
        return load_quad_manifest(path);
    }
    let Some(path) = &data.manifest else {
        return Err(Error::Config("data.manifest or data.quad_manifest is required".into()));
    };
    let frames = load_frames(path)?;
    let (quads, _) = split_quads(&frames, Split::Train, None, &data.blend, data.cbi_failure_policy, config.seed)?;
    Ok(quads)
}

/// One analysis item per anchor of every quad.
pub fn quad_items(quads: &[AlignedQuad]) -> Vec<AnalysisItem<'_>> {
    quads
        .iter()
        .flat_map(|q| {
            AnchorKind::ALL.into_iter().map(move |k| AnalysisItem {
                item_id: q.frame_id.clone(),
                video_id: q.video_id.clone(),
                kind: k,
                image: q.image(k),
            })
        })
        .collect()
}

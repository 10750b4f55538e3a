//! Oriented, detection and transition losses and their weighted sum.
//!
//! Every loss is reduced by a batch mean. Probabilities are clamped to
//! `[EPS, 1 - EPS]` before taking logs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::StrategyKind;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d: f64,
    pub l_o: f64,
    pub l_t: f64,
    pub l_overall: f64,
}

impl LossReport {
    pub fn new(l_d: f64, l_o: f64, l_t: f64, weights: &LossWeights) -> Self {
        Self {
            l_d,
            l_o,
            l_t,
            l_overall: overall_loss(l_d, l_o, l_t, weights),
        }
    }

    /// Relative gap between the stored total and the recomputed weighted sum.
    pub fn decomposition_error(&self, weights: &LossWeights) -> f64 {
        let want = overall_loss(self.l_d, self.l_o, self.l_t, weights);
        (self.l_overall - want).abs() / want.abs().max(1e-300)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_d, self.l_o, self.l_t, self.l_overall].iter().all(|v| v.is_finite())
    }
}

fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Binary cross-entropy summed over the attribute components of one sample.
pub fn oriented_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(&p, &t)| bce(p, t)).sum()
}

pub fn detection_loss(score: f64, label: f64) -> f64 {
    bce(score, label)
}

pub fn overall_loss(l_d: f64, l_o: f64, l_t: f64, weights: &LossWeights) -> f64 {
    l_d + weights.beta * l_o + weights.gamma * l_t
}

/// Batch mean of the oriented loss. `pred` and `target` are `[n, k]`.
/// Multi-class predictions use categorical cross-entropy against one-hot rows.
pub fn oriented_loss_graph(g: &mut Graph, pred: Var, target: &Tensor, strategy: StrategyKind) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Shape(format!(
            "oriented target {:?} vs prediction {:?}",
            target.shape(),
            g.shape(pred)
        )));
    }
    let rows = match strategy {
        StrategyKind::MultiClass => g.soft_ce_rows(pred, target, EPS),
        _ => g.bce_rows(pred, target, EPS),
    };
    Ok(g.mean(rows))
}

/// Batch mean of the detection loss. `score` is `[n, 1]`, `labels` has `n` entries.
pub fn detection_loss_graph(g: &mut Graph, score: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.shape(score).to_vec();
    if shape != [labels.len(), 1] {
        return Err(Error::Shape(format!("detection score {shape:?} for {} labels", labels.len())));
    }
    let target = Tensor::new(vec![labels.len(), 1], labels.to_vec())?;
    let rows = g.bce_rows(score, &target, EPS);
    Ok(g.mean(rows))
}

/// Draws a standard-normal tensor of the given shape.
pub fn sample_noise(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum over (from, to) of mean_batch ||T(N, F_from) - sg(F_to)||`, with a
/// fresh noise draw for each pair. Targets are detached.
pub fn transition_loss_graph<R, T>(g: &mut Graph, pairs: &[(Var, Var)], rng: &mut R, mut mapper: T) -> Result<Var>
where
    R: Rng,
    T: FnMut(&mut Graph, Var, Var) -> Var,
{
    if pairs.is_empty() {
        return Err(Error::Shape("transition loss needs at least one pair".into()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(from, to) in pairs {
        let shape = g.shape(from).to_vec();
        if g.shape(to) != shape.as_slice() {
            return Err(Error::Shape(format!("transition pair {:?} vs {:?}", shape, g.shape(to))));
        }
        let noise = g.constant(sample_noise(rng, &shape));
        let moved = mapper(g, noise, from);
        if g.shape(moved) != shape.as_slice() {
            return Err(Error::Shape(format!("mapper output {:?} vs {:?}", g.shape(moved), shape)));
        }
        let target = g.detach(to);
        let diff = g.sub(moved, target);
        let norms = g.row_l2_norm(diff);
        terms.push(g.mean(norms));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

/// Single-quad transition loss over plain tensors; `features` are ordered
/// from least to most fake.
pub fn transition_loss<R, T>(features: &[Tensor], rng: &mut R, mut mapper: T) -> Result<f64>
where
    R: Rng,
    T: FnMut(&Tensor, &Tensor) -> Tensor,
{
    let mut total = 0.0;
    for w in features.windows(2) {
        if w[0].shape() != w[1].shape() {
            return Err(Error::Shape(format!("features {:?} vs {:?}", w[0].shape(), w[1].shape())));
        }
        let noise = sample_noise(rng, w[0].shape());
        let moved = mapper(&noise, &w[0]);
        if moved.shape() != w[1].shape() {
            return Err(Error::Shape(format!("mapper output {:?} vs {:?}", moved.shape(), w[1].shape())));
        }
        total += moved.zip_map(&w[1], |a, b| a - b).norm();
    }
    Ok(total)
}

/// Combines graph losses into the weighted total. Absent terms count as 0.
pub fn overall_loss_graph(g: &mut Graph, l_d: Var, l_o: Option<Var>, l_t: Option<Var>, w: &LossWeights) -> Var {
    let mut total = l_d;
    if let Some(o) = l_o {
        let s = g.scale(o, w.beta);
        total = g.add(total, s);
    }
    if let Some(t) = l_t {
        let s = g.scale(t, w.gamma);
        total = g.add(total, s);
    }
    total
}

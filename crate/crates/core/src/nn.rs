//! Parameter storage, layer building blocks and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Grads, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Collects parameter gradients from a backward pass; parameters the
    /// graph never touched get zeros.
    pub fn gradients(&self, graph: &Graph, grads: &Grads) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (id, var) in graph.param_vars() {
            if let Some(g) = grads.get(var) {
                out[id.0] = g.clone();
            }
        }
        out
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// A `k×k` convolution with bias. Weights use He-normal initialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (kernel * kernel * in_channels) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[kernel, kernel, in_channels, out_channels], (2.0 / fan_in).sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad: kernel / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Fully connected layer with Xavier-normal initialization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_features: usize, out_features: usize) -> Self {
        let std = (2.0 / (in_features + out_features) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[in_features, out_features], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `frozen` parameters keep their moments and values.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], frozen: &dyn Fn(ParamId) -> bool) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if frozen(id) {
                continue;
            }
            let g = &grads[id.0];
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g.data()[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g.data()[i] * g.data()[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            let grads = g.backward(l);
            let gs = store.gradients(&g, &grads);
            adam.step(&mut store, &gs, &|_| false);
        }
        assert!(store.get(id).norm() < 1e-2);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let before = store.clone();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &store,
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3]));
        let y = lin.forward(&mut g, &store, x);
        let l = g.sum(y);
        let grads = g.backward(l);
        let gs = store.gradients(&g, &grads);
        adam.step(&mut store, &gs, &|_| false);
        assert_eq!(before, store);
    }
}

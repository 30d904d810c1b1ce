//! Parameter storage and the forward-pass context shared by all network
//! modules.
//!
//! Layers are addressed by dotted prefixes (`backbone.stage0.conv`); a
//! convolution at prefix `p` owns `p.weight` and optionally `p.bias`, a
//! normalization layer owns `p.gamma`, `p.beta` and the buffers
//! `p.running_mean`, `p.running_var`.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::adaptation::Adapter;
use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Normalization epsilon used by every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;

/// Named arrays in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies every entry under `prefix` into `other`, renaming the prefix.
    pub fn copy_prefix_into(&self, prefix: &str, other: &mut ParamStore, new_prefix: &str) {
        for (k, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            other.insert(format!("{new_prefix}{}", &k[prefix.len()..]), t.clone());
        }
    }
}

/// Trainable parameters plus non-trainable normalization statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    pub params: ParamStore,
    pub buffers: ParamStore,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_conv<R: Rng>(&mut self, rng: &mut R, prefix: &str, cout: usize, cin: usize, kernel: usize, bias: bool) {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = Tensor::from_shape_fn(IxDyn(&[cout, cin, kernel, kernel]), |_| normal.sample(rng));
        self.params.insert(format!("{prefix}.weight"), w);
        if bias {
            self.params
                .insert(format!("{prefix}.bias"), Tensor::zeros(IxDyn(&[cout])));
        }
    }

    pub fn add_depthwise<R: Rng>(&mut self, rng: &mut R, prefix: &str, channels: usize, kernel: usize) {
        let fan_in = (kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = Tensor::from_shape_fn(IxDyn(&[channels, 1, kernel, kernel]), |_| normal.sample(rng));
        self.params.insert(format!("{prefix}.weight"), w);
    }

    pub fn add_batch_norm(&mut self, prefix: &str, channels: usize, with_running: bool) {
        self.params
            .insert(format!("{prefix}.gamma"), Tensor::ones(IxDyn(&[channels])));
        self.params
            .insert(format!("{prefix}.beta"), Tensor::zeros(IxDyn(&[channels])));
        if with_running {
            self.buffers
                .insert(format!("{prefix}.running_mean"), Tensor::zeros(IxDyn(&[channels])));
            self.buffers
                .insert(format!("{prefix}.running_var"), Tensor::ones(IxDyn(&[channels])));
        }
    }

    pub fn running_stats(&self, prefix: &str) -> Result<(Array1<f64>, Array1<f64>)> {
        let m = self.buffers.get(&format!("{prefix}.running_mean"))?;
        let v = self.buffers.get(&format!("{prefix}.running_var"))?;
        Ok((to_vec1(m), to_vec1(v)))
    }

    pub fn affine(&self, prefix: &str) -> Result<(Array1<f64>, Array1<f64>)> {
        let g = self.params.get(&format!("{prefix}.gamma"))?;
        let b = self.params.get(&format!("{prefix}.beta"))?;
        Ok((to_vec1(g), to_vec1(b)))
    }

    /// Applies the running-statistics update
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_update(&mut self, update: &BnUpdate, momentum: f64) -> Result<()> {
        let m = self.buffers.get_mut(&format!("{}.running_mean", update.layer))?;
        m.zip_mut_with(&update.mean.view().into_dyn(), |r, &b| {
            *r = (1.0 - momentum) * *r + momentum * b
        });
        let v = self.buffers.get_mut(&format!("{}.running_var", update.layer))?;
        v.zip_mut_with(&update.var.view().into_dyn(), |r, &b| {
            *r = (1.0 - momentum) * *r + momentum * b
        });
        Ok(())
    }
}

pub fn to_vec1(t: &Tensor) -> Array1<f64> {
    Array1::from_iter(t.iter().copied())
}

/// Batch statistics observed by one training-mode normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// How normalization layers obtain their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running-stat updates are recorded.
    Train,
    /// Stored running statistics (or adapted ones in the heads).
    Frozen,
}

/// Which part of the network a normalization layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnScope {
    Backbone,
    /// Head layers; the only ones that test-time adaptation touches.
    Head,
    /// Projection MLPs used only by the training losses.
    Projection,
}

/// One forward pass: a fresh tape bound to a set of weights.
pub struct Forward<'a> {
    pub g: Graph,
    weights: &'a Weights,
    bound: HashMap<String, Var>,
    trainable: bool,
    mode: BnMode,
    updates: Vec<BnUpdate>,
    adapter: Option<&'a mut Adapter>,
}

impl<'a> Forward<'a> {
    /// Inference pass: frozen statistics, no parameter gradients.
    pub fn inference(weights: &'a Weights) -> Self {
        Self::new(weights, false, BnMode::Frozen)
    }

    /// Training pass: batch statistics, gradients for every parameter.
    pub fn training(weights: &'a Weights) -> Self {
        Self::new(weights, true, BnMode::Train)
    }

    pub fn new(weights: &'a Weights, trainable: bool, mode: BnMode) -> Self {
        Self {
            g: Graph::new(),
            weights,
            bound: HashMap::new(),
            trainable,
            mode,
            updates: Vec::new(),
            adapter: None,
        }
    }

    /// Routes head normalization layers through `adapter`.
    pub fn with_adapter(mut self, adapter: Option<&'a mut Adapter>) -> Self {
        self.adapter = adapter;
        self
    }

    pub fn weights(&self) -> &Weights {
        self.weights
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Leaf node for a named parameter, created once per pass.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.weights.params.get(name)?.clone();
        let v = self.g.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes `name` resolve to an existing node, e.g. a variable whose
    /// gradient is being checked.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Gradient of `loss` for every bound parameter, zeros where unreached.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, self.g.shape(v))))
            .collect()
    }

    pub fn take_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.updates)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.weights.params.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.g.conv2d(x, w, b, stride, pad)
    }

    pub fn depthwise(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        self.g.depthwise_conv2d(x, w, None, stride, pad)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var, scope: BnScope) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (y, mean, var) = self.g.batch_norm_train(x, gamma, beta, BN_EPS);
                self.updates.push(BnUpdate {
                    layer: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            BnMode::Frozen => {
                if scope == BnScope::Head {
                    if let Some(adapter) = self.adapter.as_deref_mut() {
                        let y = adapter.normalize(prefix, self.weights, self.g.value(x))?;
                        return Ok(self.g.constant(y));
                    }
                }
                let (mean, var) = self.weights.running_stats(prefix)?;
                Ok(self.g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS))
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
    fn running_update_is_convex_blend() {
        let mut w = Weights::new();
        w.add_batch_norm("bn", 2, true);
        let up = BnUpdate {
            layer: "bn".into(),
            mean: Array1::from(vec![1.0, -1.0]),
            var: Array1::from(vec![3.0, 1.0]),
        };
        w.apply_bn_update(&up, 0.1).unwrap();
        let (m, v) = w.running_stats("bn").unwrap();
        assert!((m[0] - 0.1).abs() < 1e-15 && (m[1] + 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn params_bind_once_per_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = Weights::new();
        w.add_conv(&mut rng, "c", 2, 3, 1, true);
        let mut f = Forward::training(&w);
        let a = f.param("c.weight").unwrap();
        let b = f.param("c.weight").unwrap();
        assert_eq!(a, b);
        assert!(f.param("missing").is_err());
    }

    #[test]
    fn train_mode_records_updates() {
        let mut w = Weights::new();
        w.add_batch_norm("bn", 1, true);
        let mut f = Forward::training(&w);
        let x = f.input(Tensor::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1., 2., 3., 4.]).unwrap());
        f.batch_norm("bn", x, BnScope::Backbone).unwrap();
        let ups = f.take_updates();
        assert_eq!(ups.len(), 1);
        assert_eq!(ups[0].mean[0], 2.5);
        assert_eq!(ups[0].var[0], 1.25);
    }
}

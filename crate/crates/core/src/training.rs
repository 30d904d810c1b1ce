//! Offline training: tuple batches through the full network, the combined
//! loss, Adam with global-norm clipping, and running-statistic updates of
//! every normalization layer.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::heads::HeadOutputs;
use crate::losses::{
    focal_graph, giou_graph, init_projection, total_graph, transitive_relation_graph, FocalParams, LossWeights,
};
use crate::model::SiamAbc;
use crate::nn::{BnUpdate, Forward, Weights};
use crate::sampling::{AugmentParams, SequenceRecord, TrainingTuple, TupleSampler, DEFAULT_DELTA};
use crate::types::{FeatureMap, ImagePatch, FEATURE_STRIDE, SEARCH_SIZE};

/// Prefix of the training-only projection heads.
pub const PROJECTION_PREFIX: &str = "proj.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Running-statistic momentum `alpha`.
    pub bn_momentum: f64,
    /// Maximum frame gap of a tuple.
    pub delta: usize,
    pub augment: AugmentParams,
    pub loss: LossWeights,
    pub focal: FocalParams,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 10.0,
            bn_momentum: 0.1,
            delta: DEFAULT_DELTA,
            augment: AugmentParams::default(),
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// Small-batch settings for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            lr: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("grad_clip and weight_decay must be non-negative".into()));
        }
        self.augment.validate()?;
        self.loss.validate()
    }
}

/// Loss terms of one step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub l_iou: f64,
    pub l_fl: f64,
    pub l_tr: f64,
    pub l_reg: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Graph nodes of the batched loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_iou: Var,
    pub l_fl: Var,
    pub l_tr: Var,
    pub l_reg: Var,
}

struct Batch {
    template: Tensor,
    dynamic_template: Tensor,
    dynamic_search: Tensor,
    search: Tensor,
    gt: Tensor,
    target: Tensor,
}

fn assemble(tuples: &[TrainingTuple]) -> Result<Batch> {
    let stack = |f: fn(&TrainingTuple) -> &ImagePatch| ImagePatch::stack(&tuples.iter().map(f).collect::<Vec<_>>());
    let n = tuples.len();
    let gt = Array4::from_shape_fn((n, 4, 1, 1), |(i, k, _, _)| {
        let b = &tuples[i].gt;
        [b.x_min, b.y_min, b.x_max, b.y_max][k] / SEARCH_SIZE as f64
    });
    let maps: Vec<_> = tuples.iter().map(|t| t.target.view().insert_axis(Axis(0))).collect();
    let target = ndarray::concatenate(Axis(0), &maps).map_err(|e| Error::shape(e.to_string()))?;
    Ok(Batch {
        template: stack(|t| &t.template)?,
        dynamic_template: stack(|t| &t.dynamic_template)?,
        dynamic_search: stack(|t| &t.dynamic_search)?,
        search: stack(|t| &t.search)?,
        gt: gt.into_dyn(),
        target: target.into_dyn(),
    })
}

/// Builds the combined loss of `tuples` on `f`.
pub fn loss_graph(
    f: &mut Forward<'_>,
    model: &SiamAbc,
    tuples: &[TrainingTuple],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let b = assemble(tuples)?;
    let i_t = f.input(b.template);
    let i_d = f.input(b.dynamic_template);
    let i_s = f.input(b.dynamic_search);
    let i_c = f.input(b.search);
    let v = model.forward_graph(f, i_t, i_d, i_s, i_c)?;
    let gt = f.input(b.gt);
    let mask = f.input(b.target);
    let l_iou = giou_graph(&mut f.g, v.heads.bbox, gt, mask);
    let l_fl = focal_graph(&mut f.g, v.heads.cls, mask, &cfg.focal);
    let (l_tr, l_reg) = transitive_relation_graph(f, v.omega_template, v.omega_search, v.f_t)?;
    let total = total_graph(&mut f.g, l_iou, l_fl, l_tr, l_reg, &cfg.loss);
    Ok(LossVars {
        total,
        l_iou,
        l_fl,
        l_tr,
        l_reg,
    })
}

/// Intermediates of one training-mode pass over a single tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingForward {
    pub heads: HeadOutputs,
    pub omega_template: FeatureMap,
    pub omega_search: FeatureMap,
    pub f_t: FeatureMap,
}

pub fn forward_training(model: &SiamAbc, tuple: &TrainingTuple) -> Result<TrainingForward> {
    let mut f = Forward::training(&model.weights);
    let inputs = [
        &tuple.template,
        &tuple.dynamic_template,
        &tuple.dynamic_search,
        &tuple.search,
    ]
    .map(|p| ImagePatch::stack(&[p]).map(|t| f.input(t)));
    let [i_t, i_d, i_s, i_c] = inputs;
    let v = model.forward_graph(&mut f, i_t?, i_d?, i_s?, i_c?)?;
    let map = |x: Var| FeatureMap::from_batch(f.g.value(x), 0, FEATURE_STRIDE);
    Ok(TrainingForward {
        heads: HeadOutputs::from_batch(f.g.value(v.heads.cls), f.g.value(v.heads.bbox), 0)?,
        omega_template: map(v.omega_template)?,
        omega_search: map(v.omega_search)?,
        f_t: map(v.f_t)?,
    })
}

/// Adam with decoupled moments per named parameter.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn update(&mut self, weights: &mut Weights, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = weights.params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(IxDyn(g.shape())));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(IxDyn(g.shape())));
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g + cfg.weight_decay * *p;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                });
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales the gradients so their global norm is at most `max`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max: f64) -> f64 {
    let norm = grad_norm(grads);
    if max > 0.0 && norm > max {
        let s = max / norm;
        grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub stats: StepStats,
    /// Batch statistics applied to the running buffers, in order.
    pub bn_updates: Vec<BnUpdate>,
}

/// Model plus projection heads plus optimizer state.
pub struct Trainer {
    pub model: SiamAbc,
    pub config: TrainConfig,
    pub adam: Adam,
    pub log: Vec<StepStats>,
}

impl Trainer {
    /// Adds projection heads to `model` (seeded from `seed`) and prepares
    /// the optimizer.
    pub fn new(mut model: SiamAbc, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if model.weights.params.count(PROJECTION_PREFIX) == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f6a);
            init_projection(&mut rng, &mut model.weights, model.config.channels());
        }
        Ok(Self {
            model,
            config,
            adam: Adam::default(),
            log: Vec::new(),
        })
    }

    /// Loss and parameter gradients of a batch, without updating anything.
    pub fn gradients(&self, tuples: &[TrainingTuple]) -> Result<(StepStats, BTreeMap<String, Tensor>, Vec<BnUpdate>)> {
        let mut f = Forward::training(&self.model.weights);
        let lv = loss_graph(&mut f, &self.model, tuples, &self.config)?;
        let stats = StepStats {
            step: self.adam.step as usize,
            loss: f.g.scalar(lv.total),
            l_iou: f.g.scalar(lv.l_iou),
            l_fl: f.g.scalar(lv.l_fl),
            l_tr: f.g.scalar(lv.l_tr),
            l_reg: f.g.scalar(lv.l_reg),
            grad_norm: 0.0,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: iou {} focal {} tr {} reg {}",
                stats.step, stats.l_iou, stats.l_fl, stats.l_tr, stats.l_reg
            )));
        }
        let grads = f.g.backward(lv.total);
        let pg = f.param_grads(&grads);
        if let Some((name, _)) = pg.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{name}` at step {}",
                stats.step
            )));
        }
        let updates = f.take_updates();
        Ok((stats, pg, updates))
    }

    pub fn step(&mut self, tuples: &[TrainingTuple]) -> Result<StepOutput> {
        let (mut stats, mut grads, updates) = self.gradients(tuples)?;
        stats.grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        self.adam.update(&mut self.model.weights, &grads, &self.config)?;
        for u in &updates {
            self.model.weights.apply_bn_update(u, self.config.bn_momentum)?;
        }
        stats.step = self.adam.step as usize;
        self.log.push(stats);
        Ok(StepOutput {
            stats,
            bn_updates: updates,
        })
    }

    /// Runs `config.steps` steps on tuples drawn from `records`.
    pub fn fit(&mut self, records: &[SequenceRecord], seed: u64) -> Result<()> {
        let mut sampler = TupleSampler::new(self.config.delta, self.config.augment.clone(), seed);
        let start = Instant::now();
        for s in 0..self.config.steps {
            let batch = sampler.batch(records, self.config.batch_size)?;
            let out = self.step(&batch)?;
            if self.config.log_every > 0 && (s + 1) % self.config.log_every == 0 {
                let st = out.stats;
                log::info!(
                    "step {:>5} loss {:.4} (iou {:.4} focal {:.4} tr {:.4} reg {:.4}) |g| {:.3} {:.1}s",
                    st.step,
                    st.loss,
                    st.l_iou,
                    st.l_fl,
                    st.l_tr,
                    st.l_reg,
                    st.grad_norm,
                    start.elapsed().as_secs_f64()
                );
            }
        }
        Ok(())
    }

    /// The tracking network without the projection heads.
    pub fn export(&self) -> SiamAbc {
        let mut m = self.model.clone();
        strip_projection(&mut m.weights);
        m
    }
}

/// Drops every training-only tensor.
pub fn strip_projection(w: &mut Weights) {
    let keep = |store: &crate::nn::ParamStore| {
        let mut out = crate::nn::ParamStore::new();
        for (k, t) in store.iter().filter(|(k, _)| !k.starts_with(PROJECTION_PREFIX)) {
            out.insert(k.clone(), t.clone());
        }
        out
    };
    w.params = keep(&w.params);
    w.buffers = keep(&w.buffers);
}

/// Trains a fresh network of `model_config` on `records`.
pub fn train(
    model: SiamAbc,
    config: TrainConfig,
    records: &[SequenceRecord],
    seed: u64,
) -> Result<(SiamAbc, Vec<StepStats>)> {
    let mut t = Trainer::new(model, config, seed)?;
    t.fit(records, seed)?;
    let log = std::mem::take(&mut t.log);
    Ok((t.export(), log))
}

/// CSV loss log.
pub fn format_loss_log(log: &[StepStats]) -> String {
    let mut s = String::from("step,loss,l_iou,l_fl,l_tr,l_reg,grad_norm\n");
    for r in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.l_iou, r.l_fl, r.l_tr, r.l_reg, r.grad_norm
        ));
    }
    s
}

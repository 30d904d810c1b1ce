//! Backward-free test-time adaptation of batch-normalization statistics.
//!
//! DTTA blends each frame's instance statistics with the frozen source
//! statistics, `adapted = (1 - lambda) * source + lambda * instance`, for
//! both moments. The blend is recomputed from the source values on every
//! frame, so it never drifts. Momentum, DUA and AdaBN are provided as
//! comparison baselines. Only the affine-free statistics change; `gamma`,
//! `beta` and every convolution weight stay untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayD, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{bn_apply, channel_moments};
use crate::error::{Error, Result};
use crate::nn::{Weights, BN_EPS};
use crate::types::FeatureMap;

/// Default blend weight of the instance statistics.
pub const DEFAULT_LAMBDA_BN: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    #[default]
    Off,
    Dtta,
    Momentum,
    Dua,
    Adabn,
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(AdaptMode::Off),
            "dtta" => Ok(AdaptMode::Dtta),
            "momentum" => Ok(AdaptMode::Momentum),
            "dua" => Ok(AdaptMode::Dua),
            "adabn" => Ok(AdaptMode::Adabn),
            other => Err(Error::Config(format!("unknown adaptation mode `{other}`"))),
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AdaptMode::Off => "off",
            AdaptMode::Dtta => "dtta",
            AdaptMode::Momentum => "momentum",
            AdaptMode::Dua => "dua",
            AdaptMode::Adabn => "adabn",
        };
        f.write_str(s)
    }
}

/// Rates for the recursive baselines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Momentum baseline rate, `n / (n + N)` for batch size `n = 1` and
    /// source prior strength `N = 16`.
    pub momentum_rate: f64,
    /// DUA initial momentum.
    pub dua_start: f64,
    /// DUA per-step momentum decay factor.
    pub dua_decay: f64,
    /// DUA momentum floor.
    pub dua_min: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            momentum_rate: 1.0 / 17.0,
            dua_start: 0.1,
            dua_decay: 0.94,
            dua_min: 0.005,
        }
    }
}

/// Frozen source statistics and affine of one normalization layer plus the
/// transient adapted statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerStats {
    pub source_mean: Array1<f64>,
    pub source_var: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// Statistics used for the most recent frame (DTTA, AdaBN) or the
    /// recursive running estimate (Momentum, DUA).
    pub adapted_mean: Option<Array1<f64>>,
    pub adapted_var: Option<Array1<f64>>,
    /// Instance mean of the most recent frame.
    pub instance_mean: Option<Array1<f64>>,
    pub lambda_bn: f64,
    pub eps: f64,
    /// Frames seen since the last reset.
    pub step: usize,
}

impl BnLayerStats {
    pub fn new(
        source_mean: Array1<f64>,
        source_var: Array1<f64>,
        gamma: Array1<f64>,
        beta: Array1<f64>,
        lambda_bn: f64,
    ) -> Self {
        Self {
            source_mean,
            source_var,
            gamma,
            beta,
            adapted_mean: None,
            adapted_var: None,
            instance_mean: None,
            lambda_bn,
            eps: BN_EPS,
            step: 0,
        }
    }

    /// Reads the source statistics of layer `prefix` from a checkpoint.
    pub fn from_weights(weights: &Weights, prefix: &str, lambda_bn: f64) -> Result<Self> {
        let (m, v) = weights.running_stats(prefix)?;
        let (g, b) = weights.affine(prefix)?;
        Ok(Self::new(m, v, g, b, lambda_bn))
    }

    pub fn channels(&self) -> usize {
        self.source_mean.len()
    }

    fn check(&self, x: &ArrayViewD<'_, f64>) -> Result<()> {
        if x.ndim() < 2 || x.shape()[1] != self.channels() {
            return Err(Error::shape(format!(
                "normalization layer has {} channels, input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &ArrayViewD<'_, f64>, mean: &Array1<f64>, var: &Array1<f64>) -> ArrayD<f64> {
        bn_apply(x, mean, var, &self.gamma, &self.beta, self.eps)
    }

    /// Normalization with the frozen source statistics.
    pub fn frozen(&self, x: &ArrayViewD<'_, f64>) -> Result<ArrayD<f64>> {
        self.check(x)?;
        Ok(self.apply(x, &self.source_mean, &self.source_var))
    }
}

fn blend(source: &Array1<f64>, instance: &Array1<f64>, lambda: f64) -> Array1<f64> {
    source * (1.0 - lambda) + instance * lambda
}

fn batch_view(x: &FeatureMap) -> ArrayViewD<'_, f64> {
    x.data.view().insert_axis(Axis(0)).into_dyn()
}

fn to_feature(y: ArrayD<f64>, stride: usize) -> Result<FeatureMap> {
    FeatureMap::from_dyn(y, stride)
}

/// Per-channel mean and population variance of a single feature map.
pub fn instance_moments(x: &FeatureMap) -> (Array1<f64>, Array1<f64>) {
    channel_moments(&batch_view(x))
}

/// DTTA normalization of one frame's feature map.
pub fn dtta_normalize(x: &FeatureMap, stats: &mut BnLayerStats) -> Result<FeatureMap> {
    let y = dtta_normalize_view(&batch_view(x), stats)?;
    to_feature(y, x.stride)
}

fn dtta_normalize_view(x: &ArrayViewD<'_, f64>, stats: &mut BnLayerStats) -> Result<ArrayD<f64>> {
    stats.check(x)?;
    let (mu, var) = channel_moments(x);
    let m = blend(&stats.source_mean, &mu, stats.lambda_bn);
    let v = blend(&stats.source_var, &var, stats.lambda_bn);
    let y = stats.apply(x, &m, &v);
    stats.adapted_mean = Some(m);
    stats.adapted_var = Some(v);
    stats.instance_mean = Some(mu);
    stats.step += 1;
    Ok(y)
}

/// One frame of a backward-free baseline.
///
/// * `Momentum`: normalize with the running estimate, then move it toward
///   the instance statistics at a fixed batch-size-weighted rate.
/// * `Dua`: the same recursion with a decaying momentum
///   `max(dua_min, dua_start * dua_decay^t)`; the estimate is seeded from
///   the source statistics, so frame 0 is normalized exactly as frozen.
/// * `Adabn`: instance statistics replace the source statistics.
pub fn baseline_adapt(
    mode: AdaptMode,
    x: &FeatureMap,
    stats: &mut BnLayerStats,
    params: &BaselineParams,
) -> Result<FeatureMap> {
    let y = baseline_adapt_view(mode, &batch_view(x), stats, params)?;
    to_feature(y, x.stride)
}

fn baseline_adapt_view(
    mode: AdaptMode,
    x: &ArrayViewD<'_, f64>,
    stats: &mut BnLayerStats,
    params: &BaselineParams,
) -> Result<ArrayD<f64>> {
    stats.check(x)?;
    let (mu, var) = channel_moments(x);
    stats.instance_mean = Some(mu.clone());
    let y = match mode {
        AdaptMode::Adabn => {
            let y = stats.apply(x, &mu, &var);
            stats.adapted_mean = Some(mu);
            stats.adapted_var = Some(var);
            y
        }
        AdaptMode::Momentum | AdaptMode::Dua => {
            let rate = if mode == AdaptMode::Momentum {
                params.momentum_rate
            } else {
                (params.dua_start * params.dua_decay.powi(stats.step as i32)).max(params.dua_min)
            };
            let cur_m = stats.adapted_mean.take().unwrap_or_else(|| stats.source_mean.clone());
            let cur_v = stats.adapted_var.take().unwrap_or_else(|| stats.source_var.clone());
            let y = stats.apply(x, &cur_m, &cur_v);
            stats.adapted_mean = Some(blend(&cur_m, &mu, rate));
            stats.adapted_var = Some(blend(&cur_v, &var, rate));
            y
        }
        AdaptMode::Off | AdaptMode::Dtta => {
            return Err(Error::Config(format!("`{mode}` is not a baseline adaptation mode")))
        }
    };
    stats.step += 1;
    Ok(y)
}

/// Discards the adapted statistics; source statistics and affine are kept.
pub fn reset_stats(stats: &mut BnLayerStats) {
    stats.adapted_mean = None;
    stats.adapted_var = None;
    stats.instance_mean = None;
    stats.step = 0;
}

/// Per-sequence adaptation state for every head normalization layer.
///
/// Layers are registered lazily the first time they are seen, reading the
/// source statistics from the weights in use.
#[derive(Clone, Debug)]
pub struct Adapter {
    mode: AdaptMode,
    lambda_bn: f64,
    baseline: BaselineParams,
    layers: BTreeMap<String, BnLayerStats>,
}

impl Adapter {
    pub fn new(mode: AdaptMode, lambda_bn: f64) -> Self {
        Self {
            mode,
            lambda_bn,
            baseline: BaselineParams::default(),
            layers: BTreeMap::new(),
        }
    }

    pub fn with_baseline(mut self, params: BaselineParams) -> Self {
        self.baseline = params;
        self
    }

    pub fn mode(&self) -> AdaptMode {
        self.mode
    }

    pub fn lambda_bn(&self) -> f64 {
        self.lambda_bn
    }

    pub fn layer(&self, name: &str) -> Option<&BnLayerStats> {
        self.layers.get(name)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&String, &BnLayerStats)> {
        self.layers.iter()
    }

    pub fn reset(&mut self) {
        self.layers.values_mut().for_each(reset_stats);
    }

    /// Normalizes `x: [N, C, h, w]` for layer `name`; samples are treated as
    /// consecutive frames of batch size one.
    pub fn normalize(&mut self, name: &str, weights: &Weights, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        if !self.layers.contains_key(name) {
            let stats = BnLayerStats::from_weights(weights, name, self.lambda_bn)?;
            self.layers.insert(name.to_string(), stats);
        }
        let stats = self.layers.get_mut(name).expect("registered above");
        let mut out = x.clone();
        for (i, sample) in x.axis_iter(Axis(0)).enumerate() {
            let view = sample.insert_axis(Axis(0));
            let y = match self.mode {
                AdaptMode::Off => stats.frozen(&view)?,
                AdaptMode::Dtta => dtta_normalize_view(&view, stats)?,
                mode => baseline_adapt_view(mode, &view, stats, &self.baseline)?,
            };
            out.index_axis_mut(Axis(0), i).assign(&y.index_axis(Axis(0), 0));
        }
        Ok(out)
    }
}

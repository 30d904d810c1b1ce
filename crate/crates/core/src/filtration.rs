//! Fast mixed filtration over a concatenated pair of feature maps.
//!
//! For `x: D x h x w` and inner width `Ci = D / S`:
//!
//! ```text
//! V      = W_v x                                  Ci x h x w
//! Q_ch   = softmax_hw(W_qch x)                    1  x h x w
//! A_ch   = sigmoid(LN(W_ch(sum_hw V * Q_ch)))     D  x 1 x 1
//! Q_sp   = softmax_c(avgpool(W_qsp x))            Ci x 1 x 1
//! A_sp   = sigmoid(sum_c Q_sp * V)                1  x h x w
//! gated  = (A_ch + A_sp) * x
//! ```
//!
//! The value projection `W_v` is shared by both filters. The polarized
//! self-attention baseline is the same computation with separate value
//! projections for the channel and spatial paths.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Forward, Weights};
use crate::types::FeatureMap;

/// Layer-norm epsilon of the channel filter.
pub const LN_EPS: f64 = 1e-5;
/// Default squeeze rate `S`.
pub const DEFAULT_SQUEEZE: usize = 2;

fn inner_width(channels: usize, squeeze: usize) -> Result<usize> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::shape(format!(
            "filtration input must have an even channel count, got {channels}"
        )));
    }
    if squeeze == 0 || channels % squeeze != 0 {
        return Err(Error::Config(format!("squeeze rate {squeeze} must divide {channels}")));
    }
    Ok(channels / squeeze)
}

/// Registers FMF parameters under `prefix` for input width `channels`.
pub fn init_fmf<R: Rng>(rng: &mut R, w: &mut Weights, prefix: &str, channels: usize, squeeze: usize) -> Result<()> {
    let ci = inner_width(channels, squeeze)?;
    w.add_conv(rng, &format!("{prefix}.value"), ci, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.query_ch"), 1, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.query_sp"), ci, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.unsqueeze"), channels, ci, 1, true);
    w.add_batch_norm(&format!("{prefix}.norm"), channels, false);
    Ok(())
}

/// Registers the polarized self-attention baseline under `prefix`.
pub fn init_psa<R: Rng>(rng: &mut R, w: &mut Weights, prefix: &str, channels: usize, squeeze: usize) -> Result<()> {
    let ci = inner_width(channels, squeeze)?;
    w.add_conv(rng, &format!("{prefix}.value_ch"), ci, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.value_sp"), ci, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.query_ch"), 1, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.query_sp"), ci, channels, 1, true);
    w.add_conv(rng, &format!("{prefix}.unsqueeze"), channels, ci, 1, true);
    w.add_batch_norm(&format!("{prefix}.norm"), channels, false);
    Ok(())
}

/// Registers the 1x1 reduction `channels -> channels / 2`.
pub fn init_reduce<R: Rng>(rng: &mut R, w: &mut Weights, prefix: &str, channels: usize) {
    w.add_conv(rng, prefix, channels / 2, channels, 1, true);
}

/// Closed-form FMF parameter count: `3*D*Ci + 2*Ci + 4*D + 1`.
pub fn fmf_param_count(channels: usize, squeeze: usize) -> usize {
    let (d, ci) = (channels, channels / squeeze);
    3 * d * ci + 2 * ci + 4 * d + 1
}

/// Closed-form baseline parameter count: FMF plus one more value map.
pub fn psa_param_count(channels: usize, squeeze: usize) -> usize {
    let (d, ci) = (channels, channels / squeeze);
    fmf_param_count(channels, squeeze) + d * ci + ci
}

/// Multiply-adds of one FMF pass over an `h x w` map (normalization and
/// activation costs excluded).
pub fn fmf_macs(channels: usize, squeeze: usize, h: usize, w: usize) -> usize {
    let (d, ci, hw) = (channels, channels / squeeze, h * w);
    // value + query_sp + query_ch + channel pooling + spatial pooling + gating
    hw * (2 * d * ci + d + 2 * ci + d) + ci * d + ci * hw
}

pub fn psa_macs(channels: usize, squeeze: usize, h: usize, w: usize) -> usize {
    fmf_macs(channels, squeeze, h, w) + channels * (channels / squeeze) * h * w
}

/// Intermediate nodes of one filtration pass.
#[derive(Clone, Copy, Debug)]
pub struct FilterVars {
    pub gated: Var,
    /// `A_ch + A_sp`, broadcast to `[N, D, h, w]`.
    pub gate: Var,
    /// `[N, D, 1, 1]`.
    pub channel_filter: Var,
    /// `[N, 1, h, w]`.
    pub spatial_filter: Var,
    /// `[N, 1, h, w]`, sums to one over positions.
    pub q_ch: Var,
    /// `[N, Ci, 1, 1]`, sums to one over channels.
    pub q_sp: Var,
}

fn layer_norm(f: &mut Forward<'_>, prefix: &str, z: Var) -> Result<Var> {
    let d = f.g.shape(z)[1];
    let mu = f.g.mean_axes(z, &[1]);
    let c = f.g.sub(z, mu);
    let sq = f.g.square(c);
    let var = f.g.mean_axes(sq, &[1]);
    let var = f.g.add_scalar(var, LN_EPS);
    let sd = f.g.sqrt(var);
    let n = f.g.div(c, sd);
    let gamma = f.param(&format!("{prefix}.gamma"))?;
    let beta = f.param(&format!("{prefix}.beta"))?;
    let gamma = f.g.reshape(gamma, &[1, d, 1, 1])?;
    let beta = f.g.reshape(beta, &[1, d, 1, 1])?;
    let n = f.g.mul(n, gamma);
    Ok(f.g.add(n, beta))
}

fn filter_graph(f: &mut Forward<'_>, prefix: &str, x: Var, value_ch: &str, value_sp: &str) -> Result<FilterVars> {
    let shape = f.g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("filtration input must be 4-d, got {shape:?}")));
    }
    if shape[1] % 2 != 0 {
        return Err(Error::shape(format!(
            "filtration input must have an even channel count, got {}",
            shape[1]
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);

    let v_ch = f.conv(&format!("{prefix}.{value_ch}"), x, 1, 0)?;
    let v_sp = if value_sp == value_ch {
        v_ch
    } else {
        f.conv(&format!("{prefix}.{value_sp}"), x, 1, 0)?
    };

    // channel filter
    let q = f.conv(&format!("{prefix}.query_ch"), x, 1, 0)?;
    let q = f.g.reshape(q, &[n, 1, h * w])?;
    let q = f.g.softmax(q, 2);
    let q_ch = f.g.reshape(q, &[n, 1, h, w])?;
    let z = f.g.mul(v_ch, q_ch);
    let z = f.g.sum_axes(z, &[2, 3]);
    let z = f.conv(&format!("{prefix}.unsqueeze"), z, 1, 0)?;
    let z = layer_norm(f, &format!("{prefix}.norm"), z)?;
    let channel_filter = f.g.sigmoid(z);

    // spatial filter
    let q = f.conv(&format!("{prefix}.query_sp"), x, 1, 0)?;
    let q = f.g.mean_axes(q, &[2, 3]);
    let q_sp = f.g.softmax(q, 1);
    let s = f.g.mul(q_sp, v_sp);
    let s = f.g.sum_axes(s, &[1]);
    let spatial_filter = f.g.sigmoid(s);

    let gate = f.g.add(channel_filter, spatial_filter);
    let gated = f.g.mul(gate, x);
    Ok(FilterVars {
        gated,
        gate,
        channel_filter,
        spatial_filter,
        q_ch,
        q_sp,
    })
}

/// FMF on `x: [N, D, h, w]` with parameters under `prefix`.
pub fn fmf_graph(f: &mut Forward<'_>, prefix: &str, x: Var) -> Result<FilterVars> {
    filter_graph(f, prefix, x, "value", "value")
}

/// Polarized self-attention baseline with unshared value maps.
pub fn psa_graph(f: &mut Forward<'_>, prefix: &str, x: Var) -> Result<FilterVars> {
    filter_graph(f, prefix, x, "value_ch", "value_sp")
}

pub fn reduce_graph(f: &mut Forward<'_>, prefix: &str, x: Var) -> Result<Var> {
    f.conv(prefix, x, 1, 0)
}

/// Standalone FMF parameters, stored under the `fmf` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct FmfWeights {
    pub weights: Weights,
    pub channels: usize,
    pub squeeze: usize,
}

impl FmfWeights {
    pub const PREFIX: &'static str = "fmf";

    pub fn random<R: Rng>(rng: &mut R, channels: usize, squeeze: usize) -> Result<Self> {
        let mut weights = Weights::new();
        init_fmf(rng, &mut weights, Self::PREFIX, channels, squeeze)?;
        Ok(Self {
            weights,
            channels,
            squeeze,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.params.count(Self::PREFIX)
    }
}

/// Standalone baseline parameters, stored under the `psa` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PsaWeights {
    pub weights: Weights,
    pub channels: usize,
    pub squeeze: usize,
}

impl PsaWeights {
    pub const PREFIX: &'static str = "psa";

    pub fn random<R: Rng>(rng: &mut R, channels: usize, squeeze: usize) -> Result<Self> {
        let mut weights = Weights::new();
        init_psa(rng, &mut weights, Self::PREFIX, channels, squeeze)?;
        Ok(Self {
            weights,
            channels,
            squeeze,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.params.count(Self::PREFIX)
    }
}

/// Result of [`fmf_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct FmfOutput {
    pub gated: FeatureMap,
    pub gate: FeatureMap,
    /// `A_ch`, one value per channel.
    pub channel_filter: Array1<f64>,
    /// `A_sp`, one value per position.
    pub spatial_filter: Array2<f64>,
    pub q_ch: Array2<f64>,
    pub q_sp: Array1<f64>,
}

fn check_width(x: &FeatureMap, expected: usize) -> Result<()> {
    if x.channels() % 2 != 0 {
        return Err(Error::shape(format!(
            "filtration input must have an even channel count, got {}",
            x.channels()
        )));
    }
    if x.channels() != expected {
        return Err(Error::shape(format!(
            "filtration weights expect {expected} channels, got {}",
            x.channels()
        )));
    }
    Ok(())
}

pub fn fmf_forward(x: &FeatureMap, w: &FmfWeights) -> Result<FmfOutput> {
    check_width(x, w.channels)?;
    let mut f = Forward::inference(&w.weights);
    let xv = f.input(x.to_batch());
    let vars = fmf_graph(&mut f, FmfWeights::PREFIX, xv)?;
    let (h, wd) = (x.height(), x.width());
    let val = |v: Var| f.g.value(v).iter().copied().collect::<Vec<_>>();
    Ok(FmfOutput {
        gated: FeatureMap::from_batch(f.g.value(vars.gated), 0, x.stride)?,
        gate: FeatureMap::from_batch(f.g.value(vars.gate), 0, x.stride)?,
        channel_filter: Array1::from(val(vars.channel_filter)),
        spatial_filter: Array2::from_shape_vec((h, wd), val(vars.spatial_filter))
            .map_err(|e| Error::shape(e.to_string()))?,
        q_ch: Array2::from_shape_vec((h, wd), val(vars.q_ch)).map_err(|e| Error::shape(e.to_string()))?,
        q_sp: Array1::from(val(vars.q_sp)),
    })
}

pub fn psa_baseline_forward(x: &FeatureMap, w: &PsaWeights) -> Result<FeatureMap> {
    check_width(x, w.channels)?;
    let mut f = Forward::inference(&w.weights);
    let xv = f.input(x.to_batch());
    let vars = psa_graph(&mut f, PsaWeights::PREFIX, xv)?;
    FeatureMap::from_batch(f.g.value(vars.gated), 0, x.stride)
}

/// 1x1 reduction `2C -> C` with weights stored at `prefix`.
pub fn channel_reduce(weights: &Weights, prefix: &str, gated: &FeatureMap) -> Result<FeatureMap> {
    let w = weights.params.get(&format!("{prefix}.weight"))?;
    if w.shape()[1] != gated.channels() {
        return Err(Error::shape(format!(
            "reduction expects {} channels, got {}",
            w.shape()[1],
            gated.channels()
        )));
    }
    let mut f = Forward::inference(weights);
    let x = f.input(gated.to_batch());
    let y = reduce_graph(&mut f, prefix, x)?;
    FeatureMap::from_batch(f.g.value(y), 0, gated.stride)
}

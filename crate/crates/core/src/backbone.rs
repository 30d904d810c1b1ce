//! Shared-weight feature extractor.
//!
//! Four stride-2 stages (3x3 conv, batch norm, ReLU) bring every input to
//! stride 16; optional stride-1 convolutions per stage widen the receptive
//! field. A final 1x1 convolution without activation adapts the last stage
//! width to the working width `C`. All four tracker inputs go through the
//! same parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BnScope, Forward, Weights};
use crate::types::{FeatureMap, ImagePatch, FEATURE_STRIDE};

pub const PREFIX: &str = "backbone";
pub const ADAPTER: &str = "backbone.adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output width of each of the four stages.
    pub widths: Vec<usize>,
    /// Working width `C` after the channel adapter.
    pub channels: usize,
    /// Convolutions per stage; the first is strided, the rest keep the size.
    pub stage_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 96],
            channels: 128,
            stage_depth: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs exactly 4 stage widths for stride {FEATURE_STRIDE}, got {}",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.channels == 0 || self.stage_depth == 0 {
            return Err(Error::Config("backbone widths and depth must be positive".into()));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn init<R: Rng>(&self, rng: &mut R, w: &mut Weights) -> Result<()> {
        self.validate()?;
        let mut cin = 3;
        for (s, &cout) in self.widths.iter().enumerate() {
            for d in 0..self.stage_depth {
                let p = conv_name(s, d);
                w.add_conv(rng, &p, cout, if d == 0 { cin } else { cout }, 3, false);
                w.add_batch_norm(&format!("{p}.bn"), cout, true);
            }
            cin = cout;
        }
        w.add_conv(rng, ADAPTER, self.channels, cin, 1, true);
        Ok(())
    }

    /// Trainable scalar count of the extractor including the adapter.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut cin = 3;
        for &cout in &self.widths {
            n += cout * cin * 9 + 2 * cout;
            n += (self.stage_depth - 1) * (cout * cout * 9 + 2 * cout);
            cin = cout;
        }
        n + self.channels * cin + self.channels
    }
}

fn conv_name(stage: usize, depth: usize) -> String {
    format!("{PREFIX}.stage{stage}.conv{depth}")
}

/// Raw extractor output `[N, widths[3], H/16, W/16]` for `x: [N, 3, H, W]`.
pub fn raw_graph(f: &mut Forward<'_>, cfg: &BackboneConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for s in 0..cfg.widths.len() {
        for d in 0..cfg.stage_depth {
            let p = conv_name(s, d);
            h = f.conv(&p, h, if d == 0 { 2 } else { 1 }, 1)?;
            h = f.batch_norm(&format!("{p}.bn"), h, BnScope::Backbone)?;
            h = f.g.relu(h);
        }
    }
    Ok(h)
}

/// 1x1 linear map to the working width, no activation.
pub fn adapter_graph(f: &mut Forward<'_>, raw: Var) -> Result<Var> {
    f.conv(ADAPTER, raw, 1, 0)
}

/// `F(x)`: extractor followed by the channel adapter.
pub fn features_graph(f: &mut Forward<'_>, cfg: &BackboneConfig, x: Var) -> Result<Var> {
    let raw = raw_graph(f, cfg, x)?;
    adapter_graph(f, raw)
}

/// Features of one patch with frozen normalization statistics.
pub fn backbone_forward(weights: &Weights, cfg: &BackboneConfig, patch: &ImagePatch) -> Result<FeatureMap> {
    let mut f = Forward::inference(weights);
    let x = f.input(ImagePatch::stack(&[patch])?);
    let y = features_graph(&mut f, cfg, x)?;
    FeatureMap::from_batch(f.g.value(y), 0, FEATURE_STRIDE)
}

/// Extractor output before the adapter.
pub fn backbone_raw_forward(weights: &Weights, cfg: &BackboneConfig, patch: &ImagePatch) -> Result<FeatureMap> {
    let mut f = Forward::inference(weights);
    let x = f.input(ImagePatch::stack(&[patch])?);
    let y = raw_graph(&mut f, cfg, x)?;
    FeatureMap::from_batch(f.g.value(y), 0, FEATURE_STRIDE)
}

/// Applies the channel adapter to a raw extractor map.
pub fn channel_adapter(weights: &Weights, raw: &FeatureMap) -> Result<FeatureMap> {
    let w = weights.params.get(&format!("{ADAPTER}.weight"))?;
    if w.shape()[1] != raw.channels() {
        return Err(Error::shape(format!(
            "adapter expects {} channels, got {}",
            w.shape()[1],
            raw.channels()
        )));
    }
    let mut f = Forward::inference(weights);
    let x = f.input(raw.to_batch());
    let y = adapter_graph(&mut f, x)?;
    FeatureMap::from_batch(f.g.value(y), 0, raw.stride)
}

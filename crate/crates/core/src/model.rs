//! The full tracking network: shared extractor, mixed filtration of the
//! dual template and dual search region, correlation, fusion and heads.
//!
//! ```text
//! x_T = reduce(FMF([F(I_D), F(I_T)]))        C x 8 x 8
//! x_t = reduce(FMF([F(I_t), F(I_S)]))        C x 16 x 16
//! out = heads(fuse([corr(x_T, x_t), F(I_t)]))
//! ```
//!
//! One set of filtration weights serves both pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::Adapter;
use crate::autograd::Var;
use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::filtration::{self, DEFAULT_SQUEEZE};
use crate::fusion;
use crate::heads::{self, HeadConfig, HeadOutputs, HeadVars};
use crate::nn::{Forward, Weights};
use crate::types::{FeatureMap, ImagePatch, FEATURE_STRIDE, TEMPLATE_GRID};

pub const FMF: &str = "filtration.fmf";
pub const REDUCE: &str = "filtration.reduce";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Squeeze rate of the filtration block.
    pub squeeze: usize,
    pub heads: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            squeeze: DEFAULT_SQUEEZE,
            heads: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.heads.validate()?;
        let d = 2 * self.backbone.channels;
        if self.squeeze == 0 || d % self.squeeze != 0 {
            return Err(Error::Config(format!(
                "squeeze rate {} must divide 2C = {d}",
                self.squeeze
            )));
        }
        Ok(())
    }

    /// Working width `C`.
    pub fn channels(&self) -> usize {
        self.backbone.channels
    }
}

/// Network parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct SiamAbc {
    pub config: ModelConfig,
    pub weights: Weights,
}

/// Graph nodes of a full training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub heads: HeadVars,
    /// Filtered dual template `[N, C, 8, 8]`.
    pub omega_template: Var,
    /// Filtered dual search region `[N, C, 16, 16]`.
    pub omega_search: Var,
    /// Current-search features `F(I_t)`, `[N, C, 16, 16]`.
    pub f_t: Var,
}

impl SiamAbc {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        let c = config.channels();
        config.backbone.init(&mut rng, &mut w)?;
        filtration::init_fmf(&mut rng, &mut w, FMF, 2 * c, config.squeeze)?;
        filtration::init_reduce(&mut rng, &mut w, REDUCE, 2 * c);
        fusion::init_fuse(
            &mut rng,
            &mut w,
            TEMPLATE_GRID * TEMPLATE_GRID,
            c,
            config.heads.channels,
        );
        config.heads.init(&mut rng, &mut w)?;
        Ok(Self { config, weights: w })
    }

    pub fn param_count(&self) -> usize {
        self.weights.params.count("")
    }

    // ------------------------------------------------------------ graph level

    pub fn features_graph(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        backbone::features_graph(f, &self.config.backbone, x)
    }

    /// `reduce(FMF([a, b]))`.
    pub fn filter_pair_graph(&self, f: &mut Forward<'_>, a: Var, b: Var) -> Result<Var> {
        let x = f.g.concat(&[a, b], 1)?;
        let vars = filtration::fmf_graph(f, FMF, x)?;
        filtration::reduce_graph(f, REDUCE, vars.gated)
    }

    /// Correlation, fusion and heads.
    pub fn head_graph(
        &self,
        f: &mut Forward<'_>,
        omega_template: Var,
        omega_search: Var,
        f_t: Var,
    ) -> Result<HeadVars> {
        let corr = fusion::correlation_graph(f, omega_template, omega_search)?;
        let fused = fusion::fuse_graph(f, corr, f_t)?;
        heads::heads_graph(f, &self.config.heads, fused)
    }

    /// Full pass over image batches `[N, 3, H, W]` of the four inputs.
    pub fn forward_graph(&self, f: &mut Forward<'_>, i_t: Var, i_d: Var, i_s: Var, i_cur: Var) -> Result<ForwardVars> {
        let ft = self.features_graph(f, i_t)?;
        let fd = self.features_graph(f, i_d)?;
        let fs = self.features_graph(f, i_s)?;
        let fc = self.features_graph(f, i_cur)?;
        let omega_template = self.filter_pair_graph(f, fd, ft)?;
        let omega_search = self.filter_pair_graph(f, fc, fs)?;
        let heads = self.head_graph(f, omega_template, omega_search, fc)?;
        Ok(ForwardVars {
            heads,
            omega_template,
            omega_search,
            f_t: fc,
        })
    }

    // -------------------------------------------------------- inference level

    /// `F(patch)` with frozen statistics.
    pub fn encode(&self, patch: &ImagePatch) -> Result<FeatureMap> {
        backbone::backbone_forward(&self.weights, &self.config.backbone, patch)
    }

    /// `reduce(FMF([a, b]))` for single maps.
    pub fn filter_pair(&self, a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
        let mut f = Forward::inference(&self.weights);
        let (av, bv) = (f.input(a.to_batch()), f.input(b.to_batch()));
        let y = self.filter_pair_graph(&mut f, av, bv)?;
        FeatureMap::from_batch(f.g.value(y), 0, FEATURE_STRIDE)
    }

    /// Filtered dual template from the static and dynamic template crops.
    pub fn encode_templates(&self, i_t: &ImagePatch, i_d: &ImagePatch) -> Result<FeatureMap> {
        let ft = self.encode(i_t)?;
        let fd = self.encode(i_d)?;
        self.filter_pair(&fd, &ft)
    }

    /// Head outputs for the current search crop given the cached filtered
    /// template and dynamic search features. Returns `F(I_t)` as well.
    pub fn predict(
        &self,
        omega_template: &FeatureMap,
        f_s: &FeatureMap,
        search: &ImagePatch,
        adapter: Option<&mut Adapter>,
    ) -> Result<(HeadOutputs, FeatureMap)> {
        let mut f = Forward::inference(&self.weights).with_adapter(adapter);
        let x = f.input(ImagePatch::stack(&[search])?);
        let fc = self.features_graph(&mut f, x)?;
        let fs = f.input(f_s.to_batch());
        let ot = f.input(omega_template.to_batch());
        let os = self.filter_pair_graph(&mut f, fc, fs)?;
        let hv = self.head_graph(&mut f, ot, os, fc)?;
        let out = HeadOutputs::from_batch(f.g.value(hv.cls), f.g.value(hv.bbox), 0)?;
        let fcur = FeatureMap::from_batch(f.g.value(fc), 0, FEATURE_STRIDE)?;
        Ok((out, fcur))
    }
}

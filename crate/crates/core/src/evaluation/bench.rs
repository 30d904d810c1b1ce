//! Latency, parameter and multiply-add figures for the filtration blocks
//! and the full inference step.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::{fmf_forward, fmf_macs, psa_baseline_forward, psa_macs, FmfWeights, PsaWeights};
use crate::model::{ModelConfig, SiamAbc};
use crate::nn::Forward;
use crate::types::{FeatureMap, ImagePatch, FEATURE_STRIDE, SEARCH_SIZE, TEMPLATE_GRID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Fmf,
    Psa,
    /// One tracking step: backbone on the search crop, filtration,
    /// correlation and heads.
    Full,
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmf" => Ok(Block::Fmf),
            "psa" => Ok(Block::Psa),
            "full" => Ok(Block::Full),
            _ => Err(Error::Config(format!("unknown block `{s}`, expected fmf, psa or full"))),
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Fmf => "fmf",
            Block::Psa => "psa",
            Block::Full => "full",
        })
    }
}

/// Input geometry and timing loop. For the filtration blocks `channels` is
/// the width of the concatenated input; `Full` uses `model` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchShape {
    pub channels: usize,
    pub squeeze: usize,
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            channels: 256,
            squeeze: 2,
            height: 16,
            width: 16,
            warmup: 2,
            repeats: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub block: Block,
    pub channels: usize,
    /// Per-repeat wall-clock latency in milliseconds.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub params: usize,
    pub macs: u64,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time<F: FnMut() -> Result<()>>(warmup: usize, repeats: usize, mut f: F) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut out = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        out.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(out)
}

fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0)),
        FEATURE_STRIDE,
    )
}

/// Multiply-adds of one tracking step, counted from the layer shapes.
pub fn full_step_macs(model: &SiamAbc) -> Result<u64> {
    let c = model.config.channels();
    let t = TEMPLATE_GRID;
    let g = crate::types::SEARCH_GRID;
    let mut f = Forward::inference(&model.weights);
    let x = f.input(ImagePatch::stack(&[&ImagePatch::new(Array3::zeros((
        3,
        SEARCH_SIZE,
        SEARCH_SIZE,
    )))?])?);
    let fc = model.features_graph(&mut f, x)?;
    let fs = f.input(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, c, g, g])));
    let ot = f.input(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, c, t, t])));
    let os = model.filter_pair_graph(&mut f, fc, fs)?;
    model.head_graph(&mut f, ot, os, fc)?;
    Ok(f.g.macs())
}

pub fn bench_block(block: Block, shape: &BenchShape, model: &ModelConfig) -> Result<BenchReport> {
    if shape.warmup < 1 || shape.repeats < 1 {
        return Err(Error::Config("bench needs warmup >= 1 and repeats >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
    let (samples_ms, params, macs, channels) = match block {
        Block::Fmf => {
            let w = FmfWeights::random(&mut rng, shape.channels, shape.squeeze)?;
            let x = random_map(&mut rng, shape.channels, shape.height, shape.width);
            let s = time(shape.warmup, shape.repeats, || fmf_forward(&x, &w).map(drop))?;
            let macs = fmf_macs(shape.channels, shape.squeeze, shape.height, shape.width) as u64;
            (s, w.param_count(), macs, shape.channels)
        }
        Block::Psa => {
            let w = PsaWeights::random(&mut rng, shape.channels, shape.squeeze)?;
            let x = random_map(&mut rng, shape.channels, shape.height, shape.width);
            let s = time(shape.warmup, shape.repeats, || psa_baseline_forward(&x, &w).map(drop))?;
            let macs = psa_macs(shape.channels, shape.squeeze, shape.height, shape.width) as u64;
            (s, w.param_count(), macs, shape.channels)
        }
        Block::Full => {
            let m = SiamAbc::new(model.clone(), shape.seed)?;
            let c = model.channels();
            let ot = random_map(&mut rng, c, TEMPLATE_GRID, TEMPLATE_GRID);
            let fs = random_map(&mut rng, c, crate::types::SEARCH_GRID, crate::types::SEARCH_GRID);
            let patch = ImagePatch::new(Array3::from_shape_fn((3, SEARCH_SIZE, SEARCH_SIZE), |_| {
                rng.random::<f64>()
            }))?;
            let s = time(shape.warmup, shape.repeats, || {
                m.predict(&ot, &fs, &patch, None).map(drop)
            })?;
            (s, m.param_count(), full_step_macs(&m)?, c)
        }
    };
    Ok(BenchReport {
        block,
        channels,
        median_ms: median(&samples_ms),
        p95_ms: percentile(&samples_ms, 0.95),
        samples_ms,
        params,
        macs,
    })
}

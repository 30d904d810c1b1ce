//! Classification and box heads built from separable convolutions, and
//! decoding of their dense outputs into one box per frame.
//!
//! Every hidden block is depthwise 3x3, pointwise 1x1, batch norm, ReLU;
//! the last block of each head is linear and followed by a sigmoid. The box
//! head predicts normalized corners `(x_min, y_min, x_max, y_max)` of the
//! target in search-region space. Its logits are offset by a fixed prior
//! centering a box of one third of the region on each cell, so training
//! starts from a sensible default instead of the region center.

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::Adapter;
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BnScope, Forward, Weights};
use crate::types::{BBox, FeatureMap};

pub const CLS: &str = "heads.cls";
pub const BOX: &str = "heads.box";

/// Initial foreground probability of the classifier, as a logit bias.
const CLS_PRIOR: f64 = 0.01;
/// Half side of the box prior, in normalized units.
const BOX_PRIOR_HALF: f64 = 1.0 / 6.0;
const BOX_PRIOR_CLAMP: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Input and hidden width `C_head`.
    pub channels: usize,
    pub cls_layers: usize,
    pub box_layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            cls_layers: 2,
            box_layers: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.cls_layers == 0 || self.box_layers == 0 {
            return Err(Error::Config("head widths and depths must be positive".into()));
        }
        Ok(())
    }

    pub fn init<R: Rng>(&self, rng: &mut R, w: &mut Weights) -> Result<()> {
        self.validate()?;
        for (head, layers, out) in [(CLS, self.cls_layers, 1), (BOX, self.box_layers, 4)] {
            for i in 0..layers - 1 {
                let p = format!("{head}.block{i}");
                w.add_depthwise(rng, &format!("{p}.dw"), self.channels, 3);
                w.add_conv(rng, &format!("{p}.pw"), self.channels, self.channels, 1, false);
                w.add_batch_norm(&format!("{p}.bn"), self.channels, true);
            }
            let p = format!("{head}.out");
            w.add_depthwise(rng, &format!("{p}.dw"), self.channels, 3);
            w.add_conv(rng, &format!("{p}.pw"), out, self.channels, 1, true);
            // small output weights keep the initial predictions at the priors
            w.params.get_mut(&format!("{p}.pw.weight"))?.mapv_inplace(|v| v * 0.1);
        }
        let bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        w.params.get_mut(&format!("{CLS}.out.pw.bias"))?.fill(bias);
        Ok(())
    }

    /// Names of the normalization layers, in evaluation order.
    pub fn bn_layers(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (head, layers) in [(CLS, self.cls_layers), (BOX, self.box_layers)] {
            for i in 0..layers - 1 {
                v.push(format!("{head}.block{i}.bn"));
            }
        }
        v
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fixed logit offsets `[1, 4, h, w]` for the box head.
pub fn box_prior(h: usize, w: usize) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[1, 4, h, w]), |ix| {
        let (k, i, j) = (ix[1], ix[2], ix[3]);
        let cx = (j as f64 + 0.5) / w as f64;
        let cy = (i as f64 + 0.5) / h as f64;
        let v = match k {
            0 => cx - BOX_PRIOR_HALF,
            1 => cy - BOX_PRIOR_HALF,
            2 => cx + BOX_PRIOR_HALF,
            _ => cy + BOX_PRIOR_HALF,
        };
        logit(v.clamp(BOX_PRIOR_CLAMP, 1.0 - BOX_PRIOR_CLAMP))
    })
}

fn sepconv(f: &mut Forward<'_>, prefix: &str, x: Var) -> Result<Var> {
    let y = f.depthwise(&format!("{prefix}.dw"), x, 1, 1)?;
    f.conv(&format!("{prefix}.pw"), y, 1, 0)
}

fn head_graph(f: &mut Forward<'_>, head: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers - 1 {
        let p = format!("{head}.block{i}");
        h = sepconv(f, &p, h)?;
        h = f.batch_norm(&format!("{p}.bn"), h, BnScope::Head)?;
        h = f.g.relu(h);
    }
    sepconv(f, &format!("{head}.out"), h)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls_logit: Var,
    /// `[N, 1, h, w]` in `(0, 1)`.
    pub cls: Var,
    /// `[N, 4, h, w]` normalized corners.
    pub bbox: Var,
}

pub fn heads_graph(f: &mut Forward<'_>, cfg: &HeadConfig, x: Var) -> Result<HeadVars> {
    let shape = f.g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(format!(
            "heads expect [N, {}, h, w], got {shape:?}",
            cfg.channels
        )));
    }
    let cls_logit = head_graph(f, CLS, cfg.cls_layers, x)?;
    let cls = f.g.sigmoid(cls_logit);
    let b = head_graph(f, BOX, cfg.box_layers, x)?;
    let prior = f.input(box_prior(shape[2], shape[3]));
    let b = f.g.add(b, prior);
    let bbox = f.g.sigmoid(b);
    Ok(HeadVars { cls_logit, cls, bbox })
}

/// Dense head predictions for one search region.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    /// `1 x h x w` confidences.
    pub cls: Array3<f64>,
    /// `4 x h x w` normalized corners.
    pub bbox: Array3<f64>,
}

impl HeadOutputs {
    pub fn from_batch(cls: &Tensor, bbox: &Tensor, index: usize) -> Result<Self> {
        let take = |t: &Tensor| -> Result<Array3<f64>> {
            t.index_axis(Axis(0), index)
                .to_owned()
                .into_dimensionality()
                .map_err(|e| Error::shape(e.to_string()))
        };
        Ok(Self {
            cls: take(cls)?,
            bbox: take(bbox)?,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.cls.dim();
        (h, w)
    }
}

/// Runs both heads on `fused`; head normalization goes through `adapter`
/// when one is given, otherwise it uses the stored source statistics.
pub fn heads_forward(
    weights: &Weights,
    cfg: &HeadConfig,
    fused: &FeatureMap,
    adapter: Option<&mut Adapter>,
) -> Result<HeadOutputs> {
    let mut f = Forward::inference(weights).with_adapter(adapter);
    let x = f.input(fused.to_batch());
    let v = heads_graph(&mut f, cfg, x)?;
    HeadOutputs::from_batch(f.g.value(v.cls), f.g.value(v.bbox), 0)
}

/// Separable Hann window normalized to a maximum of one.
pub fn hann_window(h: usize, w: usize) -> Array2<f64> {
    let hann = |n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
            .collect()
    };
    let (a, b) = (hann(h), hann(w));
    let mut win = Array2::from_shape_fn((h, w), |(i, j)| a[i] * b[j]);
    let max = win.fold(0.0_f64, |m, &v| m.max(v));
    if max > 0.0 {
        win.mapv_inplace(|v| v / max);
    }
    win
}

/// Chosen cell, its raw confidence and box in search-region pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    pub score: f64,
    pub cell: (usize, usize),
}

/// Picks the cell maximizing `(1 - k) * cls + k * window` and reads the box
/// there, scaled to `search_size` and clamped to the region.
pub fn decode_prediction(
    out: &HeadOutputs,
    search_size: f64,
    window: &Array2<f64>,
    window_weight: f64,
) -> Result<Decoded> {
    let (h, w) = out.grid();
    if window.dim() != (h, w) {
        return Err(Error::shape(format!(
            "window {:?} does not match grid {h}x{w}",
            window.dim()
        )));
    }
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..h {
        for j in 0..w {
            let v = (1.0 - window_weight) * out.cls[[0, i, j]] + window_weight * window[[i, j]];
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    let (i, j) = best;
    let c = |k: usize| out.bbox[[k, i, j]] * search_size;
    let bbox = BBox::new(c(0), c(1), c(2), c(3)).clamp_to(search_size, search_size);
    Ok(Decoded {
        bbox,
        score: out.cls[[0, i, j]],
        cell: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::AdaptMode;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (HeadConfig, Weights) {
        let cfg = HeadConfig {
            channels: 6,
            ..Default::default()
        };
        let mut w = Weights::new();
        cfg.init(&mut ChaCha8Rng::seed_from_u64(0), &mut w).unwrap();
        // non-trivial source statistics
        for (k, t) in w.buffers.iter_mut() {
            if k.ends_with("running_mean") {
                t.mapv_inplace(|_| 0.2);
            } else {
                t.mapv_inplace(|_| 1.7);
            }
        }
        (cfg, w)
    }

    fn fused(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Array3::from_shape_fn((6, 16, 16), |_| rng.random_range(-1.0..1.0)), 16)
    }

    #[test]
    fn output_shapes_and_ranges() {
        let (cfg, w) = setup();
        let out = heads_forward(&w, &cfg, &fused(1), None).unwrap();
        assert_eq!(out.cls.dim(), (1, 16, 16));
        assert_eq!(out.bbox.dim(), (4, 16, 16));
        assert!(out.cls.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_lambda_adapter_is_bit_identical() {
        let (cfg, w) = setup();
        let x = fused(2);
        let frozen = heads_forward(&w, &cfg, &x, None).unwrap();
        let mut ad = Adapter::new(AdaptMode::Dtta, 0.0);
        let adapted = heads_forward(&w, &cfg, &x, Some(&mut ad)).unwrap();
        assert_eq!(frozen, adapted);
    }

    #[test]
    fn missing_statistics_is_state_error() {
        let (cfg, mut w) = setup();
        w.buffers = Default::default();
        let mut ad = Adapter::new(AdaptMode::Dtta, 0.1);
        assert!(matches!(
            heads_forward(&w, &cfg, &fused(3), Some(&mut ad)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn prior_centers_third_sized_box_on_cells() {
        let p = box_prior(16, 16);
        let s = crate::autograd::sigmoid;
        assert!((s(p[[0, 0, 8, 8]]) - (8.5 / 16.0 - 1.0 / 6.0)).abs() < 1e-12);
        assert!((s(p[[0, 3, 8, 8]]) - (8.5 / 16.0 + 1.0 / 6.0)).abs() < 1e-12);
        assert!((s(p[[0, 0, 0, 0]]) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn window_is_symmetric_and_peaks_at_one() {
        let w = hann_window(16, 16);
        assert!((w.fold(0.0_f64, |m, &v| m.max(v)) - 1.0).abs() < 1e-15);
        assert_eq!(w[[0, 0]], 0.0);
        assert!((w[[3, 5]] - w[[12, 10]]).abs() < 1e-15);
    }

    #[test]
    fn uniform_cls_picks_center() {
        let out = HeadOutputs {
            cls: Array3::from_elem((1, 16, 16), 0.5),
            bbox: Array3::from_elem((4, 16, 16), 0.5),
        };
        let d = decode_prediction(&out, 256.0, &hann_window(16, 16), 0.3).unwrap();
        assert!((7..=8).contains(&d.cell.0) && (7..=8).contains(&d.cell.1));
    }

    #[test]
    fn decode_scales_corners() {
        let mut bbox = Array3::zeros((4, 16, 16));
        for (k, v) in [0.1, 0.2, 0.5, 0.6].into_iter().enumerate() {
            bbox[[k, 3, 4]] = v;
        }
        let mut cls = Array3::from_elem((1, 16, 16), 0.1);
        cls[[0, 3, 4]] = 0.9;
        let out = HeadOutputs { cls, bbox };
        let d = decode_prediction(&out, 256.0, &hann_window(16, 16), 0.0).unwrap();
        assert_eq!(d.cell, (3, 4));
        assert_eq!(d.score, 0.9);
        let b = d.bbox;
        for (got, want) in [(b.x_min, 25.6), (b.y_min, 51.2), (b.x_max, 128.0), (b.y_max, 153.6)] {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_window_weight_ignores_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = HeadOutputs {
            cls: Array3::from_shape_fn((1, 16, 16), |_| rng.random()),
            bbox: Array3::from_shape_fn((4, 16, 16), |_| rng.random()),
        };
        let a = decode_prediction(&out, 256.0, &hann_window(16, 16), 0.0).unwrap();
        let other = Array2::from_shape_fn((16, 16), |_| rng.random());
        let b = decode_prediction(&out, 256.0, &other, 0.0).unwrap();
        assert_eq!(a, b);
    }
}

//! Training objectives.
//!
//! * GIoU box loss at positive cells.
//! * Focal classification loss over all cells.
//! * Transitive relation pair `(L_TR, L_Reg)`: symmetric cosine distances
//!   between projected, globally pooled representations with the projector
//!   branch `h2` treated as a constant.
//! * The weighted total.
//!
//! Scalar reference implementations sit next to the differentiable graph
//! versions used for training.

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BnScope, Forward, Weights};
use crate::types::{BBox, FeatureMap};

/// Lower bound on each norm in the cosine distance.
pub const COS_EPS: f64 = 1e-8;
/// Probability clamp of the focal loss.
pub const PROB_EPS: f64 = 1e-7;
/// Denominator guard of the differentiable GIoU.
pub const GIOU_EPS: f64 = 1e-9;

pub const H1: &str = "proj.h1";
pub const H2: &str = "proj.h2";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub focal: f64,
    pub relation: f64,
    pub regularization: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            relation: 1.0 / 3.0,
            regularization: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.focal, self.relation, self.regularization];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

// ------------------------------------------------------------------ scalars

/// `1 - <z1/|z1|, z2/|z2|>`.
pub fn cosine_distance(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::shape(format!("vector lengths {} vs {}", z1.len(), z2.len())));
    }
    let dot: f64 = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    let n1 = z1.iter().map(|a| a * a).sum::<f64>().sqrt().max(COS_EPS);
    let n2 = z2.iter().map(|a| a * a).sum::<f64>().sqrt().max(COS_EPS);
    Ok(1.0 - dot / (n1 * n2))
}

/// `1 - GIoU(pred, gt)`, in `[0, 2]`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let iw = (pred.x_max.min(gt.x_max) - pred.x_min.max(gt.x_min)).max(0.0);
    let ih = (pred.y_max.min(gt.y_max) - pred.y_min.max(gt.y_min)).max(0.0);
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull =
        (pred.x_max.max(gt.x_max) - pred.x_min.min(gt.x_min)) * (pred.y_max.max(gt.y_max) - pred.y_min.min(gt.y_min));
    let giou = if hull > 0.0 { iou - (hull - union) / hull } else { iou };
    1.0 - giou
}

/// Focal term of one cell with predicted foreground probability `p`.
pub fn focal_term(p: f64, positive: bool, params: &FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (pt, at) = if positive {
        (p, params.alpha)
    } else {
        (1.0 - p, 1.0 - params.alpha)
    };
    -at * (1.0 - pt).powf(params.gamma) * pt.ln()
}

/// Mean focal term over all cells of matching maps.
pub fn focal_loss(cls: &Array3<f64>, target: &Array3<f64>, params: &FocalParams) -> Result<f64> {
    if cls.dim() != target.dim() {
        return Err(Error::shape(format!(
            "cls {:?} vs target {:?}",
            cls.dim(),
            target.dim()
        )));
    }
    let n = cls.len().max(1) as f64;
    Ok(cls
        .iter()
        .zip(target)
        .map(|(&p, &t)| focal_term(p, t > 0.5, params))
        .sum::<f64>()
        / n)
}

/// Binary map marking cells whose center lies inside `gt`
/// (search-region pixels); `[1, grid, grid]`, row index along y.
pub fn classification_target_map(gt: &BBox, grid: usize, search_size: f64) -> Array3<f64> {
    let mut out = Array3::zeros((1, grid, grid));
    if !(gt.area() > 0.0) {
        return out;
    }
    let stride = search_size / grid as f64;
    for i in 0..grid {
        let cy = (i as f64 + 0.5) * stride;
        for j in 0..grid {
            let cx = (j as f64 + 0.5) * stride;
            if cx >= gt.x_min && cx <= gt.x_max && cy >= gt.y_min && cy <= gt.y_max {
                out[[0, i, j]] = 1.0;
            }
        }
    }
    out
}

/// `L_IoU + w_FL L_FL + w_TR L_TR + w_Reg L_Reg`.
pub fn total_loss(l_iou: f64, l_fl: f64, l_tr: f64, l_reg: f64, w: &LossWeights) -> f64 {
    l_iou + (w.focal * l_fl + (w.relation * l_tr + w.regularization * l_reg))
}

// --------------------------------------------------------- projection heads

/// Registers `h1` (predictor) and `h2` (projector): 1x1 linear, batch
/// norm, ReLU, 1x1 linear, all at width `channels`.
pub fn init_projection<R: Rng>(rng: &mut R, w: &mut Weights, channels: usize) {
    for p in [H1, H2] {
        w.add_conv(rng, &format!("{p}.fc1"), channels, channels, 1, false);
        w.add_batch_norm(&format!("{p}.bn"), channels, true);
        w.add_conv(rng, &format!("{p}.fc2"), channels, channels, 1, true);
    }
}

/// Standalone projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub weights: Weights,
    pub channels: usize,
}

impl ProjectionHeads {
    pub fn random<R: Rng>(rng: &mut R, channels: usize) -> Self {
        let mut weights = Weights::new();
        init_projection(rng, &mut weights, channels);
        Self { weights, channels }
    }

    /// Copies `h1` onto `h2`.
    pub fn tie(&mut self) {
        let src = self.weights.clone();
        src.params.copy_prefix_into(H1, &mut self.weights.params, H2);
        src.buffers.copy_prefix_into(H1, &mut self.weights.buffers, H2);
    }

    /// Evaluates one head on a pooled vector.
    pub fn project(&self, head: &str, v: &Array1<f64>) -> Result<Array1<f64>> {
        let mut f = Forward::inference(&self.weights);
        let x = f.input(
            v.clone()
                .into_shape_with_order((1, v.len(), 1, 1))
                .map_err(|e| Error::shape(e.to_string()))?
                .into_dyn(),
        );
        let y = mlp_graph(&mut f, head, x)?;
        Ok(Array1::from_iter(f.g.value(y).iter().copied()))
    }
}

/// Global average pool `[N, C, h, w] -> [N, C, 1, 1]`.
pub fn pool_graph(g: &mut Graph, x: Var) -> Var {
    g.mean_axes(x, &[2, 3])
}

pub fn mlp_graph(f: &mut Forward<'_>, head: &str, v: Var) -> Result<Var> {
    let h = f.conv(&format!("{head}.fc1"), v, 1, 0)?;
    let h = f.batch_norm(&format!("{head}.bn"), h, BnScope::Projection)?;
    let h = f.g.relu(h);
    f.conv(&format!("{head}.fc2"), h, 1, 0)
}

/// Per-sample cosine distance of `[N, C, ...]` tensors, shape `[N]`-like.
pub fn cosine_distance_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let n = g.shape(a)[0];
    let a = g.reshape(a, &[n, g.value(a).len() / n])?;
    let b = g.reshape(b, &[n, g.value(b).len() / n])?;
    let ab = g.mul(a, b);
    let dot = g.sum_axes(ab, &[1]);
    let norm = |g: &mut Graph, x: Var| {
        let s = g.square(x);
        let s = g.sum_axes(s, &[1]);
        // bounded below so a zero vector has a finite gradient
        let s = g.clamp(s, COS_EPS * COS_EPS, f64::INFINITY);
        g.sqrt(s)
    };
    let na = norm(g, a);
    let nb = norm(g, b);
    let den = g.mul(na, nb);
    let cos = g.div(dot, den);
    Ok(g.rsub_scalar(1.0, cos))
}

/// Projected views of a pair: `(h1(a), stop(h2(b)), h1(b), stop(h2(a)))`
/// for pooled maps.
pub fn relation_views(f: &mut Forward<'_>, x1: Var, x2: Var) -> Result<[Var; 4]> {
    let p1 = pool_graph(&mut f.g, x1);
    let p2 = pool_graph(&mut f.g, x2);
    let a = mlp_graph(f, H1, p1)?;
    let b = mlp_graph(f, H2, p2)?;
    let b = f.g.detach(b);
    let c = mlp_graph(f, H1, p2)?;
    let d = mlp_graph(f, H2, p1)?;
    let d = f.g.detach(d);
    Ok([a, b, c, d])
}

/// `0.5 * (D(a, b) + D(c, d))` averaged over the batch.
pub fn relation_from_views(g: &mut Graph, v: [Var; 4]) -> Result<Var> {
    let d1 = cosine_distance_graph(g, v[0], v[1])?;
    let d2 = cosine_distance_graph(g, v[2], v[3])?;
    let s = g.add(d1, d2);
    let s = g.scale(s, 0.5);
    Ok(g.mean_all(s))
}

pub fn symmetric_relation_graph(f: &mut Forward<'_>, x1: Var, x2: Var) -> Result<Var> {
    let v = relation_views(f, x1, x2)?;
    relation_from_views(&mut f.g, v)
}

/// `(L_TR, L_Reg) = (D(x_T, x_t), D(x_T, F_t))`.
pub fn transitive_relation_graph(
    f: &mut Forward<'_>,
    omega_template: Var,
    omega_search: Var,
    f_t: Var,
) -> Result<(Var, Var)> {
    let tr = symmetric_relation_graph(f, omega_template, omega_search)?;
    let reg = symmetric_relation_graph(f, omega_template, f_t)?;
    Ok((tr, reg))
}

pub fn symmetric_relation_distance(x1: &FeatureMap, x2: &FeatureMap, p: &ProjectionHeads) -> Result<f64> {
    let mut f = Forward::inference(&p.weights);
    let (a, b) = (f.input(x1.to_batch()), f.input(x2.to_batch()));
    let d = symmetric_relation_graph(&mut f, a, b)?;
    Ok(f.g.scalar(d))
}

pub fn transitive_relation_losses(
    omega_template: &FeatureMap,
    omega_search: &FeatureMap,
    f_t: &FeatureMap,
    p: &ProjectionHeads,
) -> Result<(f64, f64)> {
    Ok((
        symmetric_relation_distance(omega_template, omega_search, p)?,
        symmetric_relation_distance(omega_template, f_t, p)?,
    ))
}

// -------------------------------------------------------- dense graph losses

/// Mean `1 - GIoU` over positive cells. `pred: [N, 4, h, w]`, `gt: [N, 4, 1, 1]`
/// and `mask: [N, 1, h, w]` (constant). Zero when there are no positives.
pub fn giou_graph(g: &mut Graph, pred: Var, gt: Var, mask: Var) -> Var {
    let c = |g: &mut Graph, x: Var, k: usize| g.narrow(x, 1, k, 1);
    let (px0, py0, px1, py1) = (c(g, pred, 0), c(g, pred, 1), c(g, pred, 2), c(g, pred, 3));
    let (gx0, gy0, gx1, gy1) = (c(g, gt, 0), c(g, gt, 1), c(g, gt, 2), c(g, gt, 3));

    let side = |g: &mut Graph, lo_a: Var, hi_a: Var, lo_b: Var, hi_b: Var| {
        let hi = g.minimum(hi_a, hi_b);
        let lo = g.maximum(lo_a, lo_b);
        let d = g.sub(hi, lo);
        g.relu(d)
    };
    let iw = side(g, px0, px1, gx0, gx1);
    let ih = side(g, py0, py1, gy0, gy1);
    let inter = g.mul(iw, ih);

    let extent = |g: &mut Graph, lo: Var, hi: Var| {
        let d = g.sub(hi, lo);
        g.relu(d)
    };
    let pw = extent(g, px0, px1);
    let ph = extent(g, py0, py1);
    let area_p = g.mul(pw, ph);
    let gw = extent(g, gx0, gx1);
    let gh = extent(g, gy0, gy1);
    let area_g = g.mul(gw, gh);
    let union = g.add(area_p, area_g);
    let union = g.sub(union, inter);

    let hull_side = |g: &mut Graph, lo_a: Var, hi_a: Var, lo_b: Var, hi_b: Var| {
        let hi = g.maximum(hi_a, hi_b);
        let lo = g.minimum(lo_a, lo_b);
        g.sub(hi, lo)
    };
    let hw = hull_side(g, px0, px1, gx0, gx1);
    let hh = hull_side(g, py0, py1, gy0, gy1);
    let hull = g.mul(hw, hh);

    let ue = g.add_scalar(union, GIOU_EPS);
    let iou = g.div(inter, ue);
    let gap = g.sub(hull, union);
    let he = g.add_scalar(hull, GIOU_EPS);
    let pen = g.div(gap, he);
    let giou = g.sub(iou, pen);
    let loss = g.rsub_scalar(1.0, giou);

    let masked = g.mul(loss, mask);
    let total = g.sum_all(masked);
    let count = g.value(mask).sum().max(1.0);
    g.scale(total, 1.0 / count)
}

/// Mean focal term over every cell. `cls: [N, 1, h, w]` probabilities,
/// `target` a constant binary map of the same shape.
pub fn focal_graph(g: &mut Graph, cls: Var, target: Var, params: &FocalParams) -> Var {
    let p = g.clamp(cls, PROB_EPS, 1.0 - PROB_EPS);
    let q = g.rsub_scalar(1.0, p);
    // positives: -alpha (1-p)^gamma ln p
    let lp = g.ln(p);
    let wq = pow(g, q, params.gamma);
    let pos = g.mul(wq, lp);
    let pos = g.scale(pos, -params.alpha);
    // negatives: -(1-alpha) p^gamma ln(1-p)
    let lq = g.ln(q);
    let wp = pow(g, p, params.gamma);
    let neg = g.mul(wp, lq);
    let neg = g.scale(neg, -(1.0 - params.alpha));
    let t = target;
    let nt = g.rsub_scalar(1.0, t);
    let a = g.mul(pos, t);
    let b = g.mul(neg, nt);
    let s = g.add(a, b);
    g.mean_all(s)
}

fn pow(g: &mut Graph, x: Var, e: f64) -> Var {
    if e == 2.0 {
        g.square(x)
    } else {
        // x > 0 after clamping
        let l = g.ln(x);
        let l = g.scale(l, e);
        g.exp(l)
    }
}

pub fn total_graph(g: &mut Graph, l_iou: Var, l_fl: Var, l_tr: Var, l_reg: Var, w: &LossWeights) -> Var {
    let tr = g.scale(l_tr, w.relation);
    let reg = g.scale(l_reg, w.regularization);
    let aux = g.add(tr, reg);
    let fl = g.scale(l_fl, w.focal);
    let rest = g.add(fl, aux);
    g.add(l_iou, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use ndarray::{Array3, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1., 2., 3.], &[1., 2., 3.]).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1., 0.], &[0., 1.]).unwrap() - 1.0).abs() < 1e-12);
        let d = cosine_distance(&[1., 1.], &[1., 0.]).unwrap();
        assert!((d - (1.0 - 0.5f64.sqrt())).abs() < 1e-10);
        assert!(cosine_distance(&[0., 0.], &[1., 0.]).unwrap().is_finite());
    }

    #[test]
    fn giou_examples() {
        let l = giou_loss(&BBox::new(0., 0., 2., 2.), &BBox::new(1., 1., 3., 3.));
        assert!((l - 68.0 / 63.0).abs() < 1e-12);
        let b = BBox::new(3., 4., 9., 7.);
        assert!(giou_loss(&b, &b).abs() < 1e-12);
        let far = giou_loss(&BBox::new(0., 0., 1., 1.), &BBox::new(1e6, 1e6, 1e6 + 1., 1e6 + 1.));
        assert!((far - 2.0).abs() < 1e-6);
    }

    #[test]
    fn focal_examples() {
        let p = FocalParams::default();
        assert!((focal_term(0.9, true, &p) - 2.634e-4).abs() < 1e-7);
        assert!((focal_term(0.1, false, &p) - 7.902e-4).abs() < 1e-7);
        let t = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| ((i + j) % 2) as f64);
        assert!(focal_loss(&t, &t, &p).unwrap() < 1e-12);
    }

    #[test]
    fn target_map_examples() {
        let m = classification_target_map(&BBox::new(64., 64., 192., 192.), 16, 256.0);
        for i in 0..16 {
            for j in 0..16 {
                let inside = (4..=11).contains(&i) && (4..=11).contains(&j);
                assert_eq!(m[[0, i, j]], if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(
            classification_target_map(&BBox::new(0., 0., 256., 256.), 16, 256.0).sum(),
            256.0
        );
        assert_eq!(
            classification_target_map(&BBox::new(8., 8., 8., 100.), 16, 256.0).sum(),
            0.0
        );
    }

    #[test]
    fn total_uses_eq_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1., 1., 1., 1., &w), 8.0 / 3.0);
        assert_eq!(total_loss(0., 0., 0., 0., &w), 0.0);
        let plain = LossWeights {
            relation: 0.0,
            regularization: 0.0,
            ..w
        };
        assert_eq!(total_loss(0.5, 0.25, 9., 9., &plain), 0.75);
        let mut g = Graph::new();
        let one = g.constant(Tensor::from_elem(IxDyn(&[]), 1.0));
        let t = total_graph(&mut g, one, one, one, one, &w);
        assert_eq!(g.scalar(t), 8.0 / 3.0);
    }

    #[test]
    fn dense_giou_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pred = Tensor::zeros(IxDyn(&[1, 4, 2, 2]));
        let mut boxes = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                let x0: f64 = rng.random_range(0.0..0.5);
                let y0: f64 = rng.random_range(0.0..0.5);
                let b = BBox::new(
                    x0,
                    y0,
                    x0 + rng.random_range(0.05..0.5),
                    y0 + rng.random_range(0.05..0.5),
                );
                for (k, v) in [b.x_min, b.y_min, b.x_max, b.y_max].into_iter().enumerate() {
                    pred[[0, k, i, j]] = v;
                }
                boxes.push(b);
            }
        }
        let gt = BBox::new(0.2, 0.25, 0.6, 0.7);
        let gt_t = Tensor::from_shape_vec(IxDyn(&[1, 4, 1, 1]), vec![0.2, 0.25, 0.6, 0.7]).unwrap();
        let mask_t = Tensor::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1., 0., 1., 1.]).unwrap();
        let mut g = Graph::new();
        let (p, t, m) = (g.constant(pred), g.constant(gt_t), g.constant(mask_t));
        let l = giou_graph(&mut g, p, t, m);
        let want = (giou_loss(&boxes[0], &gt) + giou_loss(&boxes[2], &gt) + giou_loss(&boxes[3], &gt)) / 3.0;
        assert!((g.scalar(l) - want).abs() < 1e-7);
    }

    #[test]
    fn dense_focal_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cls = Array3::from_shape_fn((1, 4, 4), |_| rng.random_range(0.01..0.99));
        let tgt = Array3::from_shape_fn((1, 4, 4), |_| f64::from(rng.random_bool(0.3)));
        let p = FocalParams::default();
        let want = focal_loss(&cls, &tgt, &p).unwrap();
        let mut g = Graph::new();
        let c = g.constant(cls.insert_axis(ndarray::Axis(0)).into_dyn());
        let t = g.constant(tgt.insert_axis(ndarray::Axis(0)).into_dyn());
        let l = focal_graph(&mut g, c, t, &p);
        assert!((g.scalar(l) - want).abs() < 1e-14);
    }

    #[test]
    fn identical_inputs_with_tied_heads_give_zero_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ProjectionHeads::random(&mut rng, 4);
        p.tie();
        let x = FeatureMap::new(Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(-1.0..1.0)), 16);
        let mut big = Array3::zeros((4, 16, 16));
        for c in 0..4 {
            big.index_axis_mut(ndarray::Axis(0), c)
                .fill(x.data.index_axis(ndarray::Axis(0), c).mean().unwrap());
        }
        let y = FeatureMap::new(big, 16);
        let (tr, reg) = transitive_relation_losses(&x, &y, &y, &p).unwrap();
        assert!(tr.abs() < 1e-9 && reg.abs() < 1e-9, "{tr} {reg}");
    }

    #[test]
    fn relation_losses_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ProjectionHeads::random(&mut rng, 4);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng, h| {
                FeatureMap::new(Array3::from_shape_fn((4, h, h), |_| rng.random_range(-1.0..1.0)), 16)
            };
            let (a, b, c) = (mk(&mut rng, 8), mk(&mut rng, 16), mk(&mut rng, 16));
            let (tr, reg) = transitive_relation_losses(&a, &b, &c, &p).unwrap();
            assert!((0.0..=2.0).contains(&tr) && (0.0..=2.0).contains(&reg));
        }
    }
}

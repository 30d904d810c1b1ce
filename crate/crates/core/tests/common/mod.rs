//! Reference implementations written with plain loops, plus fixtures.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siamabc::autograd::gradcheck::check_gradients;
use siamabc::autograd::{Graph, Tensor, Var};
use siamabc::backbone::BackboneConfig;
use siamabc::filtration::{fmf_graph, init_reduce, reduce_graph, FmfWeights, LN_EPS};
use siamabc::fusion::correlation_graph;
use siamabc::heads::HeadConfig;
use siamabc::losses::{
    focal_graph, giou_graph, mlp_graph, pool_graph, relation_from_views, relation_views, FocalParams, ProjectionHeads,
    H1,
};
use siamabc::model::ModelConfig;
use siamabc::nn::{BnMode, Forward, Weights};
use siamabc::tracker::UpdatePolicy;
use siamabc::types::{BBox, FeatureMap, ImagePatch};
use siamabc::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(Array3::from_shape_fn((c, h, w), |_| rng.random_range(-2.0..2.0)), 16)
}

pub fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> ImagePatch {
    ImagePatch::new(Array3::from_shape_fn((3, size, size), |_| rng.random::<f64>())).unwrap()
}

/// A network small enough for per-test training.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 4, 6, 8],
            channels: 6,
            stage_depth: 1,
        },
        squeeze: 2,
        heads: HeadConfig {
            channels: 6,
            cls_layers: 2,
            box_layers: 2,
        },
    }
}

/// The desk-scale network of `configs/desk.toml`.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![8, 16, 32, 48],
            channels: 64,
            stage_depth: 1,
        },
        squeeze: 2,
        heads: HeadConfig {
            channels: 64,
            ..Default::default()
        },
    }
}

fn mat(w: &Weights, name: &str) -> Array2<f64> {
    let t = w.params.get(name).unwrap();
    let (o, i) = (t.shape()[0], t.shape()[1]);
    Array2::from_shape_fn((o, i), |(a, b)| t[[a, b, 0, 0]])
}

fn vec1(w: &Weights, name: &str) -> Array1<f64> {
    Array1::from_iter(w.params.get(name).unwrap().iter().copied())
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Element-by-element evaluation of the mixed filtration: returns
/// `(gated, gate)`, both `D x h x w`.
pub fn fmf_oracle(x: &Array3<f64>, w: &FmfWeights) -> (Array3<f64>, Array3<f64>) {
    let p = FmfWeights::PREFIX;
    let ww = &w.weights;
    let (d, h, wd) = x.dim();
    let hw = h * wd;
    let wv = mat(ww, &format!("{p}.value.weight"));
    let bv = vec1(ww, &format!("{p}.value.bias"));
    let wqc = mat(ww, &format!("{p}.query_ch.weight"));
    let bqc = vec1(ww, &format!("{p}.query_ch.bias"));
    let wqs = mat(ww, &format!("{p}.query_sp.weight"));
    let bqs = vec1(ww, &format!("{p}.query_sp.bias"));
    let wu = mat(ww, &format!("{p}.unsqueeze.weight"));
    let bu = vec1(ww, &format!("{p}.unsqueeze.bias"));
    let gamma = vec1(ww, &format!("{p}.norm.gamma"));
    let beta = vec1(ww, &format!("{p}.norm.beta"));
    let ci = wv.nrows();
    let px = |k: usize, q: usize| x[[k, q / wd, q % wd]];

    let mut v = vec![vec![0.0; hw]; ci];
    for c in 0..ci {
        for q in 0..hw {
            let mut acc = bv[c];
            for k in 0..d {
                acc += wv[[c, k]] * px(k, q);
            }
            v[c][q] = acc;
        }
    }
    // channel filter
    let mut logits = vec![0.0; hw];
    for (q, l) in logits.iter_mut().enumerate() {
        let mut acc = bqc[0];
        for k in 0..d {
            acc += wqc[[0, k]] * px(k, q);
        }
        *l = acc;
    }
    let qch = softmax(&logits);
    let mut z = vec![0.0; ci];
    for c in 0..ci {
        for q in 0..hw {
            z[c] += v[c][q] * qch[q];
        }
    }
    let mut u = vec![0.0; d];
    for (o, uo) in u.iter_mut().enumerate() {
        let mut acc = bu[o];
        for c in 0..ci {
            acc += wu[[o, c]] * z[c];
        }
        *uo = acc;
    }
    let mean = u.iter().sum::<f64>() / d as f64;
    let var = u.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
    let a_ch: Vec<f64> = (0..d)
        .map(|o| sigmoid((u[o] - mean) / (var + LN_EPS).sqrt() * gamma[o] + beta[o]))
        .collect();
    // spatial filter
    let mut pooled = vec![0.0; ci];
    for c in 0..ci {
        let mut acc = 0.0;
        for q in 0..hw {
            let mut s = bqs[c];
            for k in 0..d {
                s += wqs[[c, k]] * px(k, q);
            }
            acc += s;
        }
        pooled[c] = acc / hw as f64;
    }
    let qsp = softmax(&pooled);
    let a_sp: Vec<f64> = (0..hw)
        .map(|q| sigmoid((0..ci).map(|c| qsp[c] * v[c][q]).sum()))
        .collect();

    let gate = Array3::from_shape_fn((d, h, wd), |(o, i, j)| a_ch[o] + a_sp[i * wd + j]);
    let gated = &gate * x;
    (gated, gate)
}

/// `out[i*wt + j, u, v] = <t[:, i, j], s[:, u, v]> / sqrt(C)`.
pub fn correlation_oracle(t: &Array3<f64>, s: &Array3<f64>) -> Array3<f64> {
    let (c, ht, wt) = t.dim();
    let (_, hs, ws) = s.dim();
    let scale = 1.0 / (c as f64).sqrt();
    Array3::from_shape_fn((ht * wt, hs, ws), |(k, u, v)| {
        let (i, j) = (k / wt, k % wt);
        scale * (0..c).map(|ch| t[[ch, i, j]] * s[[ch, u, v]]).sum::<f64>()
    })
}

/// `y[o, p] = b[o] + sum_k w[o, k] x[k, p]`.
pub fn pointwise_oracle(x: &Array3<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array3<f64> {
    let (d, h, wd) = x.dim();
    Array3::from_shape_fn((w.nrows(), h, wd), |(o, i, j)| {
        b.map_or(0.0, |b| b[o]) + (0..d).map(|k| w[[o, k]] * x[[k, i, j]]).sum::<f64>()
    })
}

/// Scalar simulation of the update rule; returns the 1-based steps at
/// which a refresh fires and the average after every step.
pub fn update_oracle(scores: &[f64], policy: &UpdatePolicy) -> (Vec<usize>, Vec<f64>) {
    let mut rho_bar = 1.0;
    let mut counter = 0usize;
    let mut fires = Vec::new();
    let mut avgs = Vec::new();
    for (t, &rho) in scores.iter().enumerate() {
        counter += 1;
        if counter >= policy.interval && rho > rho_bar {
            fires.push(t + 1);
            counter = 0;
        }
        rho_bar = (1.0 - policy.lambda_d) * rho_bar + policy.lambda_d * rho;
        avgs.push(rho_bar);
    }
    (fires, avgs)
}

/// Area under the success curve by direct enumeration of the 21
/// thresholds.
pub fn auc_oracle(ious: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..=20 {
        let tau = k as f64 / 20.0;
        let hits = ious.iter().filter(|&&v| v > 0.0 && v >= tau).count();
        total += hits as f64 / ious.len() as f64;
    }
    total / 21.0
}

pub fn box_area(b: &BBox) -> f64 {
    (b.x_max - b.x_min).max(0.0) * (b.y_max - b.y_min).max(0.0)
}

// ------------------------------------------------------------ gradient checks

/// Finite-difference step of the gradient checks.
pub const GRAD_STEP: f64 = 1e-5;
/// Step for the filtration check: its read-out sums many terms, so
/// rounding noise dominates at smaller steps.
pub const FMF_GRAD_STEP: f64 = 1e-4;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| r.random_range(lo..hi))
}

/// `sum(probe * y)`: a generic scalar read-out of `y`.
fn probe_sum(g: &mut Graph, y: Var, probe: &Tensor) -> Var {
    let p = g.constant(probe.clone());
    let m = g.mul(y, p);
    g.sum_all(m)
}

/// Checks a graph built on a [`Forward`] whose parameters `names` are the
/// checked inputs after the leading `plain` ones.
fn check_with_params<F>(
    weights: &Weights,
    names: &[String],
    plain: Vec<Tensor>,
    mode: BnMode,
    step: f64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Forward<'_>, &[Var]) -> Result<Var>,
{
    let extra = plain.len();
    let mut inputs = plain;
    for n in names {
        inputs.push(weights.params.get(n)?.clone());
    }
    let rep = check_gradients(
        &inputs,
        |g, v| {
            let mut f = Forward::new(weights, false, mode);
            f.g = std::mem::take(g);
            for (n, &var) in names.iter().zip(&v[extra..]) {
                f.bind(n, var);
            }
            let out = build(&mut f, &v[..extra]);
            *g = std::mem::take(&mut f.g);
            out
        },
        step,
    )?;
    Ok(rep.max_rel_err)
}

fn jitter_norm(r: &mut ChaCha8Rng, w: &mut Weights, prefix: &str) {
    for (suffix, lo, hi) in [("gamma", 0.5, 1.5), ("beta", -0.5, 0.5)] {
        if let Ok(t) = w.params.get_mut(&format!("{prefix}.{suffix}")) {
            t.mapv_inplace(|_| r.random_range(lo..hi));
        }
    }
}

/// FMF: gradients for the input and every filtration parameter.
pub fn gradcheck_fmf(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut w = FmfWeights::random(&mut r, 8, 2)?;
    jitter_norm(&mut r, &mut w.weights, &format!("{}.norm", FmfWeights::PREFIX));
    let x = uniform(&mut r, &[1, 8, 4, 4], -1.5, 1.5);
    let probe = uniform(&mut r, &[1, 8, 4, 4], -1.0, 1.0);
    let names: Vec<String> = w.weights.params.iter().map(|(k, _)| k.clone()).collect();
    check_with_params(&w.weights, &names, vec![x], BnMode::Frozen, FMF_GRAD_STEP, |f, v| {
        let out = fmf_graph(f, FmfWeights::PREFIX, v[0])?;
        Ok(probe_sum(&mut f.g, out.gated, &probe))
    })
}

/// The `2C -> C` reduction.
pub fn gradcheck_reduce(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut w = Weights::new();
    init_reduce(&mut r, &mut w, "reduce", 8);
    let x = uniform(&mut r, &[2, 8, 3, 3], -1.0, 1.0);
    let probe = uniform(&mut r, &[2, 4, 3, 3], -1.0, 1.0);
    let names = vec!["reduce.weight".to_string(), "reduce.bias".to_string()];
    check_with_params(&w, &names, vec![x], BnMode::Frozen, GRAD_STEP, |f, v| {
        let y = reduce_graph(f, "reduce", v[0])?;
        Ok(probe_sum(&mut f.g, y, &probe))
    })
}

/// Pixel-wise correlation, both operands.
pub fn gradcheck_correlation(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let t = uniform(&mut r, &[2, 4, 3, 3], -1.0, 1.0);
    let s = uniform(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    let probe = uniform(&mut r, &[2, 9, 5, 5], -1.0, 1.0);
    let w = Weights::new();
    check_with_params(&w, &[], vec![t, s], BnMode::Frozen, GRAD_STEP, |f, v| {
        let y = correlation_graph(f, v[0], v[1])?;
        Ok(probe_sum(&mut f.g, y, &probe))
    })
}

/// `L_TR + L_Reg` for the inputs and the predictor head `h1`; the
/// stop-gradient views are held at their base values.
pub fn gradcheck_relation_pair(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let c = 6;
    let mut p = ProjectionHeads::random(&mut r, c);
    jitter_norm(&mut r, &mut p.weights, &format!("{H1}.bn"));
    // a zero projection is a kink of the cosine; keep away from it
    p.weights
        .params
        .get_mut(&format!("{H1}.fc2.bias"))?
        .mapv_inplace(|_| r.random_range(0.2..0.5));
    let ot = uniform(&mut r, &[4, c, 3, 3], -1.0, 1.0);
    let os = uniform(&mut r, &[4, c, 5, 5], -1.0, 1.0);
    let ft = uniform(&mut r, &[4, c, 5, 5], -1.0, 1.0);

    // stopped views at the base point
    let mut f = Forward::new(&p.weights, false, BnMode::Train);
    let (a, b, d) = (f.input(ot.clone()), f.input(os.clone()), f.input(ft.clone()));
    let tr = relation_views(&mut f, a, b)?;
    let reg = relation_views(&mut f, a, d)?;
    let stops: Vec<Tensor> = [tr[1], tr[3], reg[1], reg[3]]
        .iter()
        .map(|&v| f.g.value(v).clone())
        .collect();

    let names: Vec<String> = p
        .weights
        .params
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| k.starts_with(H1))
        .collect();
    check_with_params(
        &p.weights,
        &names,
        vec![ot, os, ft],
        BnMode::Train,
        GRAD_STEP,
        |f, v| {
            let pooled: Vec<Var> = v.iter().map(|&x| pool_graph(&mut f.g, x)).collect();
            let h: Vec<Var> = pooled.iter().map(|&x| mlp_graph(f, H1, x)).collect::<Result<_>>()?;
            let s: Vec<Var> = stops.iter().map(|t| f.g.constant(t.clone())).collect();
            let l_tr = relation_from_views(&mut f.g, [h[0], s[0], h[1], s[1]])?;
            let l_reg = relation_from_views(&mut f.g, [h[0], s[2], h[2], s[3]])?;
            Ok(f.g.add(l_tr, l_reg))
        },
    )
}

fn random_corners(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(IxDyn(&[n, 4, h, w]));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let x0 = r.random_range(0.0..0.5);
                let y0 = r.random_range(0.0..0.5);
                t[[i, 0, y, x]] = x0;
                t[[i, 1, y, x]] = y0;
                t[[i, 2, y, x]] = x0 + r.random_range(0.1..0.5);
                t[[i, 3, y, x]] = y0 + r.random_range(0.1..0.5);
            }
        }
    }
    t
}

/// Dense GIoU loss, prediction and ground truth.
pub fn gradcheck_giou(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let pred = random_corners(&mut r, 2, 3, 3);
    let gt = random_corners(&mut r, 2, 1, 1);
    let mut mask = Tensor::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    mask[[0, 0, 1, 1]] = 1.0;
    let w = Weights::new();
    check_with_params(&w, &[], vec![pred, gt], BnMode::Frozen, GRAD_STEP, |f, v| {
        let m = f.g.constant(mask.clone());
        Ok(giou_graph(&mut f.g, v[0], v[1], m))
    })
}

/// Dense focal loss with the given focusing exponent.
pub fn gradcheck_focal(seed: u64, gamma: f64) -> Result<f64> {
    let mut r = rng(seed);
    let cls = uniform(&mut r, &[2, 1, 4, 4], 0.05, 0.95);
    let target = Tensor::from_shape_fn(IxDyn(&[2, 1, 4, 4]), |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
    let params = FocalParams {
        gamma,
        ..Default::default()
    };
    let w = Weights::new();
    check_with_params(&w, &[], vec![cls], BnMode::Frozen, GRAD_STEP, |f, v| {
        let t = f.g.constant(target.clone());
        Ok(focal_graph(&mut f.g, v[0], t, &params))
    })
}

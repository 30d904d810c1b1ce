mod common;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use siamabc::error::Error;
use siamabc::filtration::{
    channel_reduce, fmf_forward, fmf_param_count, init_reduce, psa_baseline_forward, psa_param_count, FmfWeights,
    PsaWeights,
};
use siamabc::nn::Weights;

use common::*;

#[test]
fn matches_loop_oracle_on_rectangular_maps() {
    let mut r = rng(11);
    for (c, h, w) in [(2, 1, 1), (4, 3, 7), (8, 6, 6), (12, 5, 2)] {
        let weights = FmfWeights::random(&mut r, c, 2).unwrap();
        let x = random_map(&mut r, c, h, w);
        let out = fmf_forward(&x, &weights).unwrap();
        let (gated, gate) = fmf_oracle(&x.data, &weights);
        let diff = (&out.gated.data - &gated).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        let gdiff = (&out.gate.data - &gate).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff <= 1e-10 && gdiff <= 1e-10, "{c}x{h}x{w}: {diff:e} {gdiff:e}");
    }
}

#[test]
fn gate_decomposes_into_channel_and_spatial_filters() {
    let mut r = rng(12);
    let w = FmfWeights::random(&mut r, 8, 4).unwrap();
    let x = random_map(&mut r, 8, 4, 5);
    let out = fmf_forward(&x, &w).unwrap();
    for ((c, i, j), &g) in out.gate.data.indexed_iter() {
        let want = out.channel_filter[c] + out.spatial_filter[[i, j]];
        assert!((g - want).abs() < 1e-15);
    }
    assert!(out.channel_filter.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(out.spatial_filter.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn rejects_odd_or_mismatched_widths() {
    let mut r = rng(13);
    assert!(matches!(FmfWeights::random(&mut r, 7, 1), Err(Error::Shape(_))));
    assert!(matches!(FmfWeights::random(&mut r, 8, 3), Err(Error::Config(_))));
    let w = FmfWeights::random(&mut r, 8, 2).unwrap();
    let x = random_map(&mut r, 6, 3, 3);
    assert!(matches!(fmf_forward(&x, &w), Err(Error::Shape(_))));
    let odd = random_map(&mut r, 5, 3, 3);
    assert!(matches!(fmf_forward(&odd, &w), Err(Error::Shape(_))));
}

#[test]
fn shared_value_map_is_the_baseline_with_tied_values() {
    // copying the shared value projection into both baseline value maps
    // must reproduce the filtration exactly
    let mut r = rng(14);
    let fmf = FmfWeights::random(&mut r, 8, 2).unwrap();
    let mut psa = PsaWeights::random(&mut r, 8, 2).unwrap();
    for (k, t) in fmf.weights.params.iter() {
        let rest = k.strip_prefix("fmf.").unwrap();
        if let Some(suffix) = rest.strip_prefix("value.") {
            psa.weights.params.insert(format!("psa.value_ch.{suffix}"), t.clone());
            psa.weights.params.insert(format!("psa.value_sp.{suffix}"), t.clone());
        } else {
            psa.weights.params.insert(format!("psa.{rest}"), t.clone());
        }
    }
    let x = random_map(&mut r, 8, 5, 5);
    let a = fmf_forward(&x, &fmf).unwrap().gated;
    let b = psa_baseline_forward(&x, &psa).unwrap();
    assert!((&a.data - &b.data).iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn parameter_counts_follow_closed_forms() {
    let mut r = rng(15);
    for (c, s) in [(8, 2), (16, 4), (64, 2), (128, 8)] {
        let f = FmfWeights::random(&mut r, c, s).unwrap();
        let p = PsaWeights::random(&mut r, c, s).unwrap();
        assert_eq!(f.param_count(), fmf_param_count(c, s));
        assert_eq!(p.param_count(), psa_param_count(c, s));
        assert_eq!(p.param_count() - f.param_count(), c * (c / s) + c / s);
    }
}

#[test]
fn reduction_is_a_pointwise_map() {
    let mut r = rng(16);
    let mut w = Weights::new();
    init_reduce(&mut r, &mut w, "reduce", 8);
    let x = random_map(&mut r, 8, 3, 4);
    let y = channel_reduce(&w, "reduce", &x).unwrap();
    let wt = w.params.get("reduce.weight").unwrap();
    let m = Array2::from_shape_fn((4, 8), |(o, i)| wt[[o, i, 0, 0]]);
    let b = Array1::from_iter(w.params.get("reduce.bias").unwrap().iter().copied());
    let want = pointwise_oracle(&x.data, &m, Some(&b));
    assert!((&y.data - &want).iter().all(|v| v.abs() < 1e-12));
    assert!(channel_reduce(&w, "reduce", &random_map(&mut r, 6, 3, 3)).is_err());
}

#[test]
fn gradients_of_filtration_and_reduction() {
    for seed in 20..23 {
        assert!(gradcheck_fmf(seed).unwrap() <= 1e-5);
        assert!(gradcheck_reduce(seed).unwrap() <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_stays_in_open_interval(seed in 0u64..10_000, h in 1usize..8, w in 1usize..8, scale in 0.01f64..20.0) {
        let mut r = rng(seed);
        let weights = FmfWeights::random(&mut r, 8, 2).unwrap();
        let mut x = random_map(&mut r, 8, h, w);
        x.data *= scale;
        let out = fmf_forward(&x, &weights).unwrap();
        prop_assert!(out.gate.data.iter().all(|&g| g > 0.0 && g < 2.0));
        prop_assert!((out.q_ch.sum() - 1.0).abs() < 1e-12);
        prop_assert!((out.q_sp.sum() - 1.0).abs() < 1e-12);
    }
}

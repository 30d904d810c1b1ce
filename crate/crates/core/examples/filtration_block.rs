//! Compares the fast mixed filtration block with the polarized
//! self-attention baseline on random features.
//!
//! cargo run --example filtration_block -- [channels]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamabc::filtration::{fmf_forward, fmf_macs, psa_baseline_forward, psa_macs, FmfWeights, PsaWeights};
use siamabc::types::{FeatureMap, FEATURE_STRIDE};

fn main() -> siamabc::Result<()> {
    let c: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(256);
    let (h, w, r) = (16, 16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = FeatureMap::new(
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0)),
        FEATURE_STRIDE,
    );

    let fmf = FmfWeights::random(&mut rng, c, r)?;
    let psa = PsaWeights::random(&mut rng, c, r)?;
    let out = fmf_forward(&x, &fmf)?;
    let base = psa_baseline_forward(&x, &psa)?;

    let (lo, hi) = out
        .gate
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!("input {c}x{h}x{w}, squeeze {r}");
    println!(
        "fmf: {:>8} params {:>10} macs, gate in [{lo:.3}, {hi:.3}]",
        fmf.param_count(),
        fmf_macs(c, r, h, w)
    );
    println!(
        "psa: {:>8} params {:>10} macs, output {:?}",
        psa.param_count(),
        psa_macs(c, r, h, w),
        base.data.dim()
    );
    let range = |it: &mut dyn Iterator<Item = &f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    };
    let (cl, ch) = range(&mut out.channel_filter.iter());
    let (sl, sh) = range(&mut out.spatial_filter.iter());
    println!("channel filter in [{cl:.3}, {ch:.3}], spatial filter in [{sl:.3}, {sh:.3}]");
    Ok(())
}

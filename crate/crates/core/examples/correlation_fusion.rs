//! Pixel-wise correlation of a template map with a search map that
//! contains it, and the fused head input.
//!
//! cargo run --example correlation_fusion

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamabc::fusion::{fuse_search_features, pixelwise_cross_correlation};
use siamabc::model::{ModelConfig, SiamAbc};
use siamabc::types::{FeatureMap, FEATURE_STRIDE, SEARCH_GRID, TEMPLATE_GRID};

fn main() -> siamabc::Result<()> {
    let model = SiamAbc::new(ModelConfig::default(), 0)?;
    let c = model.config.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let search = Array3::from_shape_fn((c, SEARCH_GRID, SEARCH_GRID), |_| rng.random_range(-1.0..1.0));
    // the template is the centered 8x8 window of the search map
    let lo = (SEARCH_GRID - TEMPLATE_GRID) / 2;
    let template = search
        .slice(s![.., lo..lo + TEMPLATE_GRID, lo..lo + TEMPLATE_GRID])
        .to_owned();
    let (t, x) = (
        FeatureMap::new(template, FEATURE_STRIDE),
        FeatureMap::new(search, FEATURE_STRIDE),
    );

    let corr = pixelwise_cross_correlation(&t, &x)?;
    println!(
        "correlation map {:?}: one channel per template position",
        corr.data.dim()
    );
    // channel k matches template pixel k; it peaks where that pixel sits
    let k = 3 * TEMPLATE_GRID + 5;
    let ch = corr.data.index_axis(ndarray::Axis(0), k);
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    for ((i, j), &v) in ch.indexed_iter() {
        if v > best {
            best = v;
            at = (i, j);
        }
    }
    println!("channel {k} peaks at {at:?}, expected ({}, {})", lo + 3, lo + 5);

    let fused = fuse_search_features(&model.weights, &corr, &x)?;
    println!("fused head input {:?}", fused.data.dim());
    Ok(())
}

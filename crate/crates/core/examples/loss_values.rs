//! Evaluates the training losses on hand-made inputs.
//!
//! cargo run --example loss_values

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siamabc::losses::{
    classification_target_map, focal_loss, giou_loss, total_loss, transitive_relation_losses, FocalParams, LossWeights,
    ProjectionHeads,
};
use siamabc::types::{BBox, FeatureMap, FEATURE_STRIDE, SEARCH_GRID, SEARCH_SIZE};

fn main() -> siamabc::Result<()> {
    let gt = BBox::new(96.0, 100.0, 160.0, 150.0);
    for (name, pred) in [
        ("exact", gt),
        ("shifted", BBox::new(106.0, 100.0, 170.0, 150.0)),
        ("disjoint", BBox::new(0.0, 0.0, 30.0, 30.0)),
    ] {
        println!("giou loss {name:<8} {:.4}", giou_loss(&pred, &gt));
    }

    let target = classification_target_map(&gt, SEARCH_GRID, SEARCH_SIZE as f64);
    let fp = FocalParams::default();
    let confident = target.mapv(|t| if t > 0.5 { 0.9 } else { 0.05 });
    let unsure = target.mapv(|_| 0.5);
    println!("positive cells {}", target.sum());
    println!(
        "focal loss confident {:.5}, unsure {:.5}",
        focal_loss(&confident, &target, &fp)?,
        focal_loss(&unsure, &target, &fp)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let heads = ProjectionHeads::random(&mut rng, 8);
    let map = |v: f64, h: usize| {
        FeatureMap::new(
            ndarray::Array3::from_shape_fn((8, h, h), |(c, i, _)| v * (c as f64 - i as f64 / 4.0)),
            FEATURE_STRIDE,
        )
    };
    let (l_tr, l_reg) = transitive_relation_losses(&map(1.0, 8), &map(0.8, 16), &map(-1.0, 16), &heads)?;
    println!("relation losses: tr {l_tr:.4}, reg {l_reg:.4}");
    let w = LossWeights::default();
    println!("total {:.4}", total_loss(0.3, 0.02, l_tr, l_reg, &w));
    Ok(())
}

//! Pixel-wise cross-correlation and the search-branch fusion layer.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Forward, Weights};
use crate::types::FeatureMap;

pub const FUSE: &str = "fusion.fuse";

/// Registers the fusion convolution `(corr + C) -> head_channels`.
pub fn init_fuse<R: Rng>(rng: &mut R, w: &mut Weights, corr_channels: usize, channels: usize, head_channels: usize) {
    w.add_conv(rng, FUSE, head_channels, corr_channels + channels, 1, true);
}

/// `out[i*wt + j, u, v] = <t[:, i, j], s[:, u, v]> / sqrt(C)`.
pub fn correlation_graph(f: &mut Forward<'_>, t: Var, s: Var) -> Result<Var> {
    let c = f.g.shape(t)[1];
    f.g.pixel_corr(t, s, 1.0 / (c as f64).sqrt())
}

/// Concatenates correlation maps with `F_t` and maps to the head width.
pub fn fuse_graph(f: &mut Forward<'_>, corr: Var, f_t: Var) -> Result<Var> {
    let (a, b) = (f.g.shape(corr).to_vec(), f.g.shape(f_t).to_vec());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::shape(format!(
            "cannot fuse correlation {a:?} with search features {b:?}"
        )));
    }
    let x = f.g.concat(&[corr, f_t], 1)?;
    f.conv(FUSE, x, 1, 0)
}

pub fn pixelwise_cross_correlation(t: &FeatureMap, s: &FeatureMap) -> Result<FeatureMap> {
    if t.channels() != s.channels() {
        return Err(Error::shape(format!(
            "correlation channel mismatch: template {} vs search {}",
            t.channels(),
            s.channels()
        )));
    }
    let empty = Weights::new();
    let mut f = Forward::inference(&empty);
    let (tv, sv) = (f.input(t.to_batch()), f.input(s.to_batch()));
    let y = correlation_graph(&mut f, tv, sv)?;
    FeatureMap::from_batch(f.g.value(y), 0, s.stride)
}

pub fn fuse_search_features(weights: &Weights, corr: &FeatureMap, f_t: &FeatureMap) -> Result<FeatureMap> {
    let mut f = Forward::inference(weights);
    let (c, t) = (f.input(corr.to_batch()), f.input(f_t.to_batch()));
    let y = fuse_graph(&mut f, c, t)?;
    FeatureMap::from_batch(f.g.value(y), 0, f_t.stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0)), 16)
    }

    #[test]
    fn hand_example() {
        let t = FeatureMap::new(Array3::from_elem((1, 1, 1), 2.0), 16);
        let s = FeatureMap::new(Array3::from_shape_vec((1, 2, 2), vec![1., 2., 3., 4.]).unwrap(), 16);
        let y = pixelwise_cross_correlation(&t, &s).unwrap();
        assert_eq!(y.data.iter().copied().collect::<Vec<_>>(), vec![2., 4., 6., 8.]);
    }

    #[test]
    fn orthogonal_gives_zero() {
        let mut t = Array3::zeros((2, 8, 8));
        t.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let mut s = Array3::zeros((2, 16, 16));
        s.index_axis_mut(ndarray::Axis(0), 1).fill(3.0);
        let y = pixelwise_cross_correlation(&FeatureMap::new(t, 16), &FeatureMap::new(s, 16)).unwrap();
        assert_eq!(y.data.dim(), (64, 16, 16));
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, s) = (map(&mut rng, 3, 8, 8), map(&mut rng, 4, 16, 16));
        assert!(matches!(pixelwise_cross_correlation(&t, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_shapes_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Weights::new();
        init_fuse(&mut rng, &mut w, 64, 8, 6);
        let corr = FeatureMap::new(Array3::zeros((64, 16, 16)), 16);
        let ft = FeatureMap::new(Array3::zeros((8, 16, 16)), 16);
        let y = fuse_search_features(&w, &corr, &ft).unwrap();
        assert_eq!(y.data.dim(), (6, 16, 16));
        assert!(y.data.iter().all(|&v| v == 0.0));
        let bad = FeatureMap::new(Array3::zeros((8, 8, 8)), 16);
        assert!(matches!(fuse_search_features(&w, &corr, &bad), Err(Error::Shape(_))));
    }
}

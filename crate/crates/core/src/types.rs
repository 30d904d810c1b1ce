//! Core domain values: image patches, feature maps and boxes.

use ndarray::{s, Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of template crops (`I_T`, `I_D`).
pub const TEMPLATE_SIZE: usize = 128;
/// Side of search-region crops (`I_S`, `I_t`).
pub const SEARCH_SIZE: usize = 256;
/// Backbone output stride in pixels per feature cell.
pub const FEATURE_STRIDE: usize = 16;
/// Feature grid side for search inputs.
pub const SEARCH_GRID: usize = SEARCH_SIZE / FEATURE_STRIDE;
/// Feature grid side for template inputs.
pub const TEMPLATE_GRID: usize = TEMPLATE_SIZE / FEATURE_STRIDE;

/// Which of the two legal crop sizes a patch has.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    Template,
    Search,
}

impl PatchKind {
    pub fn size(self) -> usize {
        match self {
            PatchKind::Template => TEMPLATE_SIZE,
            PatchKind::Search => SEARCH_SIZE,
        }
    }
}

/// RGB crop with values in `[0, 1]`, laid out `3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pixels: Array3<f64>,
}

impl ImagePatch {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::shape(format!("image patch must have 3 channels, got {c}")));
        }
        if h != w || (h != TEMPLATE_SIZE && h != SEARCH_SIZE) {
            return Err(Error::InputSize { height: h, width: w });
        }
        Ok(Self { pixels })
    }

    pub fn kind(&self) -> PatchKind {
        if self.pixels.dim().1 == TEMPLATE_SIZE {
            PatchKind::Template
        } else {
            PatchKind::Search
        }
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// The centered template-sized sub-crop of a search patch.
    pub fn center_template(&self) -> Result<ImagePatch> {
        if self.kind() != PatchKind::Search {
            return Err(Error::shape("center_template needs a search-sized patch"));
        }
        let off = (SEARCH_SIZE - TEMPLATE_SIZE) / 2;
        let sub = self
            .pixels
            .slice(s![.., off..off + TEMPLATE_SIZE, off..off + TEMPLATE_SIZE])
            .to_owned();
        Ok(ImagePatch { pixels: sub })
    }

    /// Stacks same-sized patches into a `[N, 3, H, W]` batch.
    pub fn stack(patches: &[&ImagePatch]) -> Result<ArrayD<f64>> {
        let first = patches
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero patches"))?;
        let size = first.size();
        let mut out = Array4::zeros((patches.len(), 3, size, size));
        for (i, p) in patches.iter().enumerate() {
            if p.size() != size {
                return Err(Error::shape("cannot stack patches of different sizes"));
            }
            out.slice_mut(s![i, .., .., ..]).assign(&p.pixels);
        }
        Ok(out.into_dyn())
    }
}

/// A `C x h x w` activation with its stride in input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Self {
        Self { data, stride }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// As a batch of one, `[1, C, h, w]`.
    pub fn to_batch(&self) -> ArrayD<f64> {
        self.data.clone().insert_axis(ndarray::Axis(0)).into_dyn()
    }

    /// Takes sample `index` of a `[N, C, h, w]` tensor.
    pub fn from_batch(t: &ArrayD<f64>, index: usize, stride: usize) -> Result<Self> {
        if t.ndim() != 4 {
            return Err(Error::shape(format!("expected 4-d batch, got {:?}", t.shape())));
        }
        let sample = t
            .index_axis(ndarray::Axis(0), index)
            .to_owned()
            .into_dimensionality()
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Self::new(sample, stride))
    }

    pub fn from_dyn(t: ArrayD<f64>, stride: usize) -> Result<Self> {
        let shape = t.shape().to_vec();
        let t = if shape.len() == 4 && shape[0] == 1 {
            t.into_shape_with_order(IxDyn(&shape[1..]))
                .map_err(|e| Error::shape(e.to_string()))?
        } else {
            t
        };
        let data = t.into_dimensionality().map_err(|e| Error::shape(e.to_string()))?;
        Ok(Self::new(data, stride))
    }
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// From the OTB `x, y, w, h` convention.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Ordered corners and finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    /// Valid with strictly positive area.
    pub fn validate_nondegenerate(&self) -> Result<()> {
        if !self.is_valid() || self.width() <= 0.0 || self.height() <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    /// Reorders swapped corners and clips to `[0, w] x [0, h]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let (x0, x1) = (self.x_min.min(self.x_max), self.x_min.max(self.x_max));
        let (y0, y1) = (self.y_min.min(self.y_max), self.y_min.max(self.y_max));
        Self::new(
            x0.clamp(0.0, width),
            y0.clamp(0.0, height),
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_sizes_are_restricted() {
        assert!(ImagePatch::new(Array3::zeros((3, 128, 128))).is_ok());
        assert!(ImagePatch::new(Array3::zeros((3, 256, 256))).is_ok());
        assert!(matches!(
            ImagePatch::new(Array3::zeros((3, 200, 200))),
            Err(Error::InputSize { .. })
        ));
        assert!(ImagePatch::new(Array3::zeros((1, 128, 128))).is_err());
    }

    #[test]
    fn center_template_is_exact_subcrop() {
        let px = Array3::from_shape_fn((3, 256, 256), |(c, y, x)| (c * 7 + y * 3 + x) as f64);
        let p = ImagePatch::new(px.clone()).unwrap();
        let t = p.center_template().unwrap();
        assert_eq!(t.pixels()[[1, 0, 0]], px[[1, 64, 64]]);
        assert_eq!(t.pixels()[[2, 127, 127]], px[[2, 191, 191]]);
    }

    #[test]
    fn clamp_orders_and_clips() {
        let b = BBox::new(50.0, -3.0, 10.0, 400.0).clamp_to(100.0, 100.0);
        assert_eq!(b, BBox::new(10.0, 0.0, 50.0, 100.0));
        assert!(b.is_valid());
    }

    #[test]
    fn xywh_round_trip() {
        let b = BBox::from_xywh(1.5, 2.0, 10.0, 4.25);
        assert_eq!(b.to_xywh(), [1.5, 2.0, 10.0, 4.25]);
    }
}

//! Frames and square context crops.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::types::{BBox, ImagePatch};

/// An 8-bit RGB frame stored `H x W x 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub rgb: Array3<u8>,
}

impl Frame {
    pub fn new(rgb: Array3<u8>) -> Result<Self> {
        if rgb.dim().2 != 3 {
            return Err(Error::shape(format!("frame must be H x W x 3, got {:?}", rgb.dim())));
        }
        Ok(Self { rgb })
    }

    /// Quantizes a `3 x H x W` float image in `[0, 1]` (values are clamped).
    pub fn from_float(img: ArrayView3<'_, f64>) -> Self {
        let (_, h, w) = img.dim();
        let rgb = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            (img[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
        });
        Self { rgb }
    }

    /// `3 x H x W` floats in `[0, 1]`.
    pub fn to_float(&self) -> Array3<f64> {
        let (h, w, _) = self.rgb.dim();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| f64::from(self.rgb[[y, x, c]]) / 255.0)
    }

    pub fn width(&self) -> usize {
        self.rgb.dim().1
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().0
    }

    /// Bilinear sample of channel `c` at continuous pixel-index position
    /// `(x, y)`; zero outside the frame.
    fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let (h, w) = (self.height() as isize, self.width() as isize);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let px = |xi: isize, yi: isize| -> f64 {
            if xi < 0 || yi < 0 || xi >= w || yi >= h {
                0.0
            } else {
                f64::from(self.rgb[[yi as usize, xi as usize, c]])
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
        let bot = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
        (top * (1.0 - fy) + bot * fy) / 255.0
    }
}

/// Square region of a frame, in frame pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

/// `s = sqrt((w + m)(h + m))` with `m = offset * (w + h) / 2`.
pub fn crop_side(b: &BBox, context_offset: f64) -> f64 {
    let (w, h) = (b.width(), b.height());
    let m = context_offset * (w + h) / 2.0;
    ((w + m) * (h + m)).sqrt()
}

impl CropWindow {
    /// Context window centered on `b`.
    pub fn around(b: &BBox, context_offset: f64) -> Result<Self> {
        b.validate_nondegenerate()?;
        let (cx, cy) = b.center();
        Ok(Self {
            cx,
            cy,
            side: crop_side(b, context_offset),
        })
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    /// Maps a frame box into the coordinates of an `out_size` crop.
    pub fn to_crop(&self, b: &BBox, out_size: usize) -> BBox {
        let s = out_size as f64 / self.side;
        BBox::new(
            (b.x_min - self.x0()) * s,
            (b.y_min - self.y0()) * s,
            (b.x_max - self.x0()) * s,
            (b.y_max - self.y0()) * s,
        )
    }

    /// Maps a crop box back into frame coordinates.
    pub fn to_frame(&self, b: &BBox, out_size: usize) -> BBox {
        let s = self.side / out_size as f64;
        BBox::new(
            b.x_min * s + self.x0(),
            b.y_min * s + self.y0(),
            b.x_max * s + self.x0(),
            b.y_max * s + self.y0(),
        )
    }

    /// The centered sub-window covering `fraction` of the side.
    pub fn centered(&self, fraction: f64) -> Self {
        Self {
            side: self.side * fraction,
            ..*self
        }
    }
}

/// Bilinear resample of `window` to `out_size` squared, zero padded.
pub fn extract(frame: &Frame, window: &CropWindow, out_size: usize) -> Result<ImagePatch> {
    if !(window.side > 0.0) || !window.side.is_finite() || !window.cx.is_finite() || !window.cy.is_finite() {
        return Err(Error::InvalidBox(format!("crop window {window:?}")));
    }
    let step = window.side / out_size as f64;
    let (x0, y0) = (window.x0(), window.y0());
    let px = Array3::from_shape_fn((3, out_size, out_size), |(c, v, u)| {
        let x = x0 + (u as f64 + 0.5) * step - 0.5;
        let y = y0 + (v as f64 + 0.5) * step - 0.5;
        frame.sample(c, x, y)
    });
    ImagePatch::new(px)
}

/// Crop of side `crop_side(b, offset)` centered on `b`, resized to `out_size`.
pub fn crop_region(frame: &Frame, b: &BBox, context_offset: f64, out_size: usize) -> Result<ImagePatch> {
    extract(frame, &CropWindow::around(b, context_offset)?, out_size)
}

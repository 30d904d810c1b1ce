//! Geometric and photometric augmentation of crops.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::crop::CropWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Context offset of template crops.
    pub template_offset: f64,
    /// Context offset of search crops.
    pub search_offset: f64,
    /// Range of the side multiplier `u1`.
    pub scale_range: (f64, f64),
    /// Range of the center multipliers `u2`, `u3`.
    pub shift_range: (f64, f64),
    /// Per-channel gain is drawn from `1 +- gain`.
    pub gain: f64,
    /// Additive brightness is drawn from `+- brightness`.
    pub brightness: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            template_offset: 0.2,
            search_offset: 2.0,
            scale_range: (0.65, 1.35),
            shift_range: (0.92, 1.08),
            gain: 0.1,
            brightness: 0.05,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= 1.0 && 1.0 <= hi && lo.is_finite() && hi.is_finite();
        if !ok(self.scale_range) || !ok(self.shift_range) {
            return Err(Error::Config(format!(
                "scale {:?} and shift {:?} ranges must be positive and contain 1",
                self.scale_range, self.shift_range
            )));
        }
        if self.template_offset < 0.0 || self.search_offset < 0.0 || self.gain < 0.0 || self.brightness < 0.0 {
            return Err(Error::Config("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// No geometric or photometric jitter.
    pub fn disabled() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            shift_range: (1.0, 1.0),
            gain: 0.0,
            brightness: 0.0,
            ..Self::default()
        }
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One draw of the geometric factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricDraw {
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl GeometricDraw {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        shift_x: 1.0,
        shift_y: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R, p: &AugmentParams) -> Self {
        Self {
            scale: draw(rng, p.scale_range),
            shift_x: draw(rng, p.shift_range),
            shift_y: draw(rng, p.shift_range),
        }
    }
}

/// Scales the side by `u1` and multiplies the crop-local center coordinate
/// (`side / 2` on each axis) by `u2`, `u3`, i.e. moves the center by
/// `(u - 1) * side / 2`.
pub fn apply_geometric_augment(window: CropWindow, d: GeometricDraw) -> CropWindow {
    CropWindow {
        cx: window.cx + (d.shift_x - 1.0) * window.side / 2.0,
        cy: window.cy + (d.shift_y - 1.0) * window.side / 2.0,
        side: window.side * d.scale,
    }
}

/// Photometric jitter: per-channel gain and a shared brightness offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub gain: [f64; 3],
    pub brightness: f64,
}

impl ColorJitter {
    pub const IDENTITY: Self = Self {
        gain: [1.0; 3],
        brightness: 0.0,
    };

    pub fn sample<R: Rng>(rng: &mut R, p: &AugmentParams) -> Self {
        let mut gain = [1.0; 3];
        for g in &mut gain {
            *g = draw(rng, (1.0 - p.gain, 1.0 + p.gain));
        }
        Self {
            gain,
            brightness: draw(rng, (-p.brightness, p.brightness)),
        }
    }

    /// Applies the jitter in place to a `3 x H x W` image, clamping to `[0, 1]`.
    pub fn apply(&self, px: &mut Array3<f64>) {
        for (c, mut plane) in px.outer_iter_mut().enumerate() {
            let g = self.gain[c];
            plane.mapv_inplace(|v| (v * g + self.brightness).clamp(0.0, 1.0));
        }
    }
}

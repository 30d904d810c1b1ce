//! Synthetic sequences: a textured shape drifting over a smooth background,
//! with exact boxes and optional per-frame corruption.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::crop::Frame;
use crate::sampling::SequenceRecord;
use crate::types::BBox;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Diamond,
    /// Drawn per sequence.
    #[default]
    Random,
}

/// Photometric shift applied after rendering, scaled by the severity
/// schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Corruption {
    #[default]
    None,
    /// Additive offset on every pixel.
    Brightness { delta: f64 },
    /// Gaussian blur with standard deviation `sigma` pixels.
    Blur { sigma: f64 },
    /// Additive Gaussian noise.
    Noise { std: f64 },
}

impl Corruption {
    /// Builds a corruption from a kind name and magnitude.
    pub fn from_name(kind: &str, magnitude: f64) -> Result<Self> {
        Ok(match kind {
            "none" => Corruption::None,
            "brightness" => Corruption::Brightness { delta: magnitude },
            "blur" => Corruption::Blur { sigma: magnitude },
            "noise" => Corruption::Noise { std: magnitude },
            other => return Err(Error::Config(format!("unknown corruption `{other}`"))),
        })
    }
}

/// How corruption strength evolves over a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Full strength on every frame.
    #[default]
    Constant,
    /// Linear from zero on the first frame to full strength on the last.
    Ramp,
}

impl Schedule {
    pub fn severity(self, t: usize, len: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Ramp if len > 1 => t as f64 / (len - 1) as f64,
            Schedule::Ramp => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: ShapeKind,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Range of the geometric mean of object width and height, pixels.
    pub size_range: (f64, f64),
    /// Range of width / height.
    pub aspect_range: (f64, f64),
    /// Range of speed, pixels per frame.
    pub speed_range: (f64, f64),
    /// Reflect the velocity at frame borders.
    pub bounce: bool,
    pub length: usize,
    pub corruption: Corruption,
    pub schedule: Schedule,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: ShapeKind::Random,
            frame_width: 160,
            frame_height: 160,
            size_range: (26.0, 42.0),
            aspect_range: (0.7, 1.4),
            speed_range: (0.3, 1.2),
            bounce: true,
            length: 100,
            corruption: Corruption::None,
            schedule: Schedule::Constant,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config(format!(
                "sequences need at least 2 frames, got {}",
                self.length
            )));
        }
        let max_side = self.size_range.1 * self.aspect_range.1.max(1.0 / self.aspect_range.0).sqrt();
        if self.size_range.0 <= 0.0
            || self.size_range.0 > self.size_range.1
            || self.aspect_range.0 <= 0.0
            || self.aspect_range.0 > self.aspect_range.1
            || self.speed_range.0 < 0.0
            || self.speed_range.0 > self.speed_range.1
        {
            return Err(Error::Config("synthetic ranges must be ordered and positive".into()));
        }
        if max_side + 2.0 >= self.frame_width.min(self.frame_height) as f64 {
            return Err(Error::Config("objects do not fit in the frame".into()));
        }
        Ok(())
    }
}

fn range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(0.1..0.6),
        rng.random_range(0.1..0.6),
        rng.random_range(0.1..0.6),
    ]
}

/// Everything that is fixed for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub kind: ShapeKind,
    pub width: usize,
    pub height: usize,
    background: [f64; 3],
    gradient: [f64; 2],
    blobs: Vec<(f64, f64, f64, [f64; 3])>,
    colors: [[f64; 3]; 2],
    /// Texture: cell size and orientation of the two-tone pattern.
    cell: f64,
    angle: f64,
    pub boxes: Vec<BBox>,
}

impl Scene {
    pub fn sample<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let kind = match spec.kind {
            ShapeKind::Random => [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Diamond][rng.random_range(0..3)],
            k => k,
        };
        let (fw, fh) = (spec.frame_width as f64, spec.frame_height as f64);
        let background = color(rng);
        let gradient = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        let blobs = (0..3)
            .map(|_| {
                let amp = [
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                ];
                (
                    rng.random_range(0.0..fw),
                    rng.random_range(0.0..fh),
                    rng.random_range(25.0..60.0),
                    amp,
                )
            })
            .collect();
        let a = color(rng);
        let mut b = color(rng);
        // keep the two texture tones clearly apart
        while a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() < 0.45 {
            b = color(rng);
        }
        let cell = rng.random_range(4.0..8.0);
        let angle = rng.random_range(0.0..PI);

        let size = range(rng, spec.size_range);
        let aspect = range(rng, spec.aspect_range);
        let (w, h) = (size * aspect.sqrt(), size / aspect.sqrt());
        let mut x = rng.random_range(1.0..fw - w - 1.0);
        let mut y = rng.random_range(1.0..fh - h - 1.0);
        let speed = range(rng, spec.speed_range);
        let dir = rng.random_range(0.0..2.0 * PI);
        let (mut vx, mut vy) = (speed * dir.cos(), speed * dir.sin());
        let mut boxes = Vec::with_capacity(spec.length);
        for _ in 0..spec.length {
            boxes.push(BBox::from_xywh(x, y, w, h));
            let (nx, ny) = (x + vx, y + vy);
            if spec.bounce && (nx < 0.0 || nx + w > fw) {
                vx = -vx;
            }
            if spec.bounce && (ny < 0.0 || ny + h > fh) {
                vy = -vy;
            }
            x = (x + vx).clamp(0.0, fw - w);
            y = (y + vy).clamp(0.0, fh - h);
        }
        Ok(Self {
            kind,
            width: spec.frame_width,
            height: spec.frame_height,
            background,
            gradient,
            blobs,
            colors: [a, b],
            cell,
            angle,
            boxes,
        })
    }

    fn inside(&self, b: &BBox, x: f64, y: f64) -> bool {
        let u = (x - b.x_min) / b.width() * 2.0 - 1.0;
        let v = (y - b.y_min) / b.height() * 2.0 - 1.0;
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            _ => true,
        }
    }

    /// Clean float render `3 x H x W` of frame `t`.
    pub fn render(&self, t: usize) -> Array3<f64> {
        let b = self.boxes[t];
        let (fw, fh) = (self.width as f64, self.height as f64);
        let (sn, cs) = self.angle.sin_cos();
        let mut img = Array3::zeros((3, self.height, self.width));
        for yi in 0..self.height {
            for xi in 0..self.width {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                let rgb = if self.inside(&b, x, y) {
                    let (lx, ly) = (x - b.x_min, y - b.y_min);
                    let (p, q) = (cs * lx + sn * ly, -sn * lx + cs * ly);
                    let k = ((p / self.cell).floor() + (q / self.cell).floor()) as i64;
                    self.colors[k.rem_euclid(2) as usize]
                } else {
                    let mut c = self.background;
                    let g = self.gradient[0] * (x / fw - 0.5) + self.gradient[1] * (y / fh - 0.5);
                    for (bx, by, s, amp) in &self.blobs {
                        let e = (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp();
                        for ch in 0..3 {
                            c[ch] += amp[ch] * e;
                        }
                    }
                    c.map(|v| v + g)
                };
                for ch in 0..3 {
                    img[[ch, yi, xi]] = rgb[ch];
                }
            }
        }
        img
    }
}

fn gaussian_blur(img: &mut Array3<f64>, sigma: f64) {
    if sigma < 0.05 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (_, h, w) = img.dim();
    let (hi, wi) = (h as isize, w as isize);
    for mut plane in img.outer_iter_mut() {
        let src = plane.to_owned();
        let mut tmp = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - r).clamp(0, wi - 1) as usize;
                    acc += kv * src[[y, xx]];
                }
                tmp[[y, x]] = acc / norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - r).clamp(0, hi - 1) as usize;
                    acc += kv * tmp[[yy, x]];
                }
                plane[[y, x]] = acc / norm;
            }
        }
    }
}

/// Applies `c` at `severity` to a float image; values are not clamped.
pub fn apply_corruption<R: Rng>(img: &mut Array3<f64>, c: &Corruption, severity: f64, rng: &mut R) {
    match *c {
        Corruption::None => {}
        Corruption::Brightness { delta } => img.mapv_inplace(|v| v + delta * severity),
        Corruption::Blur { sigma } => gaussian_blur(img, sigma * severity),
        Corruption::Noise { std } => {
            if std * severity > 0.0 {
                let n = Normal::new(0.0, std * severity).expect("finite std");
                img.mapv_inplace(|v| v + n.sample(rng));
            }
        }
    }
}

/// Renders a full sequence. The scene depends only on `rng`, not on the
/// corruption, so clean and corrupted variants share geometry.
pub fn synth_generate_sequence<R: Rng>(spec: &SynthSpec, name: &str, rng: &mut R) -> Result<SequenceRecord> {
    let scene = Scene::sample(spec, rng)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let frames = (0..spec.length)
        .map(|t| {
            let mut img = scene.render(t);
            let s = spec.schedule.severity(t, spec.length);
            apply_corruption(&mut img, &spec.corruption, s, &mut noise_rng);
            Frame::from_float(img.view())
        })
        .collect();
    SequenceRecord::new(name, frames, scene.boxes)
}

/// `count` sequences named `seq000`, `seq001`, ...; sequence `i` draws from
/// stream `i` of the generator seeded with `seed`.
pub fn synth_dataset(spec: &SynthSpec, count: usize, seed: u64) -> Result<Vec<SequenceRecord>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_generate_sequence(spec, &format!("seq{i:03}"), &mut rng)
        })
        .collect()
}

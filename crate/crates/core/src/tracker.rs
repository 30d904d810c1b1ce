//! Online tracking with the parameter-free dynamic update.
//!
//! The static template `I_T` is cut once from the first frame and never
//! replaced. The dynamic pair (`I_S`, `I_D`) is refreshed from the current
//! frame whenever at least `N` frames have passed since the last refresh
//! and the current score beats the running average
//! `rho_bar = (1 - lambda_d) * rho_bar + lambda_d * rho`, which is updated
//! after the comparison.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptMode, Adapter, DEFAULT_LAMBDA_BN};
use crate::error::{Error, Result};
use crate::heads::{decode_prediction, hann_window};
use crate::model::SiamAbc;
use crate::sampling::{crop_region, extract, CropWindow, Frame, SequenceRecord};
use crate::types::{BBox, FeatureMap, ImagePatch, SEARCH_GRID, SEARCH_SIZE, TEMPLATE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdatePolicy {
    /// Minimum frames between refreshes, `N`.
    pub interval: usize,
    /// Running-average rate `lambda_d`.
    pub lambda_d: f64,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self {
            interval: 60,
            lambda_d: 0.25,
        }
    }
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("update interval must be at least 1".into()));
        }
        if !(self.lambda_d > 0.0 && self.lambda_d <= 1.0) {
            return Err(Error::Config(format!(
                "lambda_d must be in (0, 1], got {}",
                self.lambda_d
            )));
        }
        Ok(())
    }
}

/// The scalar part of the update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreAverage {
    pub rho_bar: f64,
    pub counter: usize,
}

impl Default for ScoreAverage {
    fn default() -> Self {
        Self {
            rho_bar: 1.0,
            counter: 0,
        }
    }
}

impl ScoreAverage {
    /// Advances by one score; returns whether a refresh fires.
    pub fn step(&mut self, rho: f64, policy: &UpdatePolicy) -> bool {
        self.counter += 1;
        let fire = self.counter >= policy.interval && rho > self.rho_bar;
        if fire {
            self.counter = 0;
        }
        self.rho_bar = (1.0 - policy.lambda_d) * self.rho_bar + policy.lambda_d * rho;
        fire
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub lambda_bn: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::Off,
            lambda_bn: DEFAULT_LAMBDA_BN,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_bn) {
            return Err(Error::Config(format!(
                "lambda_bn must be in [0, 1], got {}",
                self.lambda_bn
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub update: UpdatePolicy,
    pub adapt: AdaptConfig,
    /// Weight of the cosine window in the decoding penalty.
    pub window_weight: f64,
    pub template_offset: f64,
    pub search_offset: f64,
    /// Rate at which the box size follows the prediction; 1 takes the
    /// predicted size as is.
    pub size_lr: f64,
    /// Smallest box side kept, in pixels.
    pub min_size: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            update: UpdatePolicy::default(),
            adapt: AdaptConfig::default(),
            window_weight: 0.30,
            template_offset: 0.2,
            search_offset: 2.0,
            size_lr: 1.0,
            min_size: 4.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.update.validate()?;
        self.adapt.validate()?;
        if !(0.0..=1.0).contains(&self.window_weight) {
            return Err(Error::Config("window_weight must be in [0, 1]".into()));
        }
        if !(self.size_lr > 0.0 && self.size_lr <= 1.0) {
            return Err(Error::Config("size_lr must be in (0, 1]".into()));
        }
        if self.template_offset < 0.0 || self.search_offset < 0.0 || self.min_size <= 0.0 {
            return Err(Error::Config(
                "crop offsets must be non-negative and min_size positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sequence tracker memory.
#[derive(Clone, Debug)]
pub struct TrackState {
    /// `F(I_T)`, fixed for the sequence.
    pub f_template: FeatureMap,
    /// Filtered dual template for the current `(I_T, I_D)`.
    pub omega_template: FeatureMap,
    /// Features of the current dynamic search region `I_S`.
    pub f_search: FeatureMap,
    pub dynamic_template: ImagePatch,
    pub dynamic_search: ImagePatch,
    pub bbox: BBox,
    pub average: ScoreAverage,
    /// Index of the last processed frame; the init frame is 0.
    pub frame_index: usize,
    /// Frames at which the dynamic pair was refreshed.
    pub update_frames: Vec<usize>,
    pub adapter: Option<Adapter>,
}

/// Output of one tracked frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub bbox: BBox,
    pub score: f64,
    pub updated: bool,
}

/// Boxes, scores and refresh frames of a tracked sequence; frame 0 carries
/// the initial box with score 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub update_frames: Vec<usize>,
}

pub struct Tracker<'m> {
    model: &'m SiamAbc,
    config: TrackerConfig,
    window: Array2<f64>,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m SiamAbc, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            window: hann_window(SEARCH_GRID, SEARCH_GRID),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    fn dynamic_pair(&self, frame: &Frame, bbox: &BBox) -> Result<(ImagePatch, ImagePatch, FeatureMap)> {
        let win = CropWindow::around(bbox, self.config.search_offset)?;
        let search = extract(frame, &win, SEARCH_SIZE)?;
        let template = search.center_template()?;
        let f_search = self.model.encode(&search)?;
        Ok((template, search, f_search))
    }

    pub fn init(&self, frame: &Frame, bbox: BBox) -> Result<TrackState> {
        bbox.validate_nondegenerate()?;
        let i_t = crop_region(frame, &bbox, self.config.template_offset, TEMPLATE_SIZE)?;
        let f_template = self.model.encode(&i_t)?;
        let (dynamic_template, dynamic_search, f_search) = self.dynamic_pair(frame, &bbox)?;
        let f_dynamic = self.model.encode(&dynamic_template)?;
        let omega_template = self.model.filter_pair(&f_dynamic, &f_template)?;
        let adapter = match self.config.adapt.mode {
            AdaptMode::Off => None,
            mode => Some(Adapter::new(mode, self.config.adapt.lambda_bn)),
        };
        Ok(TrackState {
            f_template,
            omega_template,
            f_search,
            dynamic_template,
            dynamic_search,
            bbox,
            average: ScoreAverage::default(),
            frame_index: 0,
            update_frames: Vec::new(),
            adapter,
        })
    }

    /// Locates the target in `frame`, then runs the dynamic update check.
    pub fn track_frame(&self, state: &mut TrackState, frame: &Frame) -> Result<FrameResult> {
        let win = CropWindow::around(&state.bbox, self.config.search_offset)?;
        let search = extract(frame, &win, SEARCH_SIZE)?;
        let (out, _) = self
            .model
            .predict(&state.omega_template, &state.f_search, &search, state.adapter.as_mut())?;
        let dec = decode_prediction(&out, SEARCH_SIZE as f64, &self.window, self.config.window_weight)?;
        let pred = win.to_frame(&dec.bbox, SEARCH_SIZE);
        let bbox = self.settle(&state.bbox, &pred, frame);
        state.frame_index += 1;
        let rho = if dec.score.is_finite() {
            dec.score.clamp(0.0, 1.0)
        } else {
            0.0
        };
        let updated = self.dynamic_update_check(state, frame, &bbox, rho)?;
        state.bbox = bbox;
        Ok(FrameResult {
            bbox,
            score: rho,
            updated,
        })
    }

    /// Blends the size, clamps into the frame and keeps a minimum extent.
    fn settle(&self, prev: &BBox, pred: &BBox, frame: &Frame) -> BBox {
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let (cx, cy) = if pred.is_finite() { pred.center() } else { prev.center() };
        let lr = self.config.size_lr;
        let blend = |p: f64, q: f64| {
            if q.is_finite() {
                (1.0 - lr) * p + lr * q.abs()
            } else {
                p
            }
        };
        let min = self.config.min_size;
        let w = blend(prev.width(), pred.width()).clamp(min, fw.max(min));
        let h = blend(prev.height(), pred.height()).clamp(min, fh.max(min));
        let cx = cx.clamp(0.0, fw);
        let cy = cy.clamp(0.0, fh);
        let b = BBox::from_center(cx, cy, w, h).clamp_to(fw, fh);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            return b;
        }
        // target pushed against a border: keep a minimal box inside
        let x0 = (cx - min / 2.0).clamp(0.0, (fw - min).max(0.0));
        let y0 = (cy - min / 2.0).clamp(0.0, (fh - min).max(0.0));
        BBox::new(x0, y0, (x0 + min).min(fw), (y0 + min).min(fh))
    }

    /// Advances the score average with `rho`; on a refresh, recrops
    /// `I_S` and `I_D` around `bbox` in `frame` and recomputes the cached
    /// features. Returns whether a refresh happened.
    pub fn dynamic_update_check(&self, state: &mut TrackState, frame: &Frame, bbox: &BBox, rho: f64) -> Result<bool> {
        let fire = state.average.step(rho, &self.config.update);
        if fire {
            let (dt, ds, fs) = self.dynamic_pair(frame, bbox)?;
            let fd = self.model.encode(&dt)?;
            state.omega_template = self.model.filter_pair(&fd, &state.f_template)?;
            state.f_search = fs;
            state.dynamic_template = dt;
            state.dynamic_search = ds;
            state.update_frames.push(state.frame_index);
        }
        Ok(fire)
    }

    /// One-pass run from the first ground-truth box.
    pub fn run(&self, record: &SequenceRecord) -> Result<SequenceResult> {
        let mut state = self.init(&record.frames[0], record.boxes[0])?;
        let mut boxes = vec![record.boxes[0]];
        let mut scores = vec![1.0];
        for frame in &record.frames[1..] {
            let r = self.track_frame(&mut state, frame)?;
            boxes.push(r.bbox);
            scores.push(r.score);
        }
        Ok(SequenceResult {
            name: record.name.clone(),
            boxes,
            scores,
            update_frames: state.update_frames,
        })
    }
}

/// Result lines `x,y,w,h`, with a trailing score column when `with_scores`.
pub fn format_results(res: &SequenceResult, with_scores: bool) -> String {
    let mut s = String::new();
    for (b, sc) in res.boxes.iter().zip(&res.scores) {
        let [x, y, w, h] = b.to_xywh();
        if with_scores {
            s.push_str(&format!("{x},{y},{w},{h},{sc}\n"));
        } else {
            s.push_str(&format!("{x},{y},{w},{h}\n"));
        }
    }
    s
}

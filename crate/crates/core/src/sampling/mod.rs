//! Training tuples: static template `I_T` from frame `i`, dynamic search
//! region `I_S` from frame `k` with the dynamic template `I_D` at its
//! center, and the augmented current search region `I_t` from frame `j`,
//! where `i <= k <= j <= i + delta`.

pub mod augment;
pub mod crop;
pub mod dataset;
pub mod synth;

use ndarray::Array3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::classification_target_map;
use crate::types::{BBox, ImagePatch, SEARCH_GRID, SEARCH_SIZE, TEMPLATE_SIZE};

pub use augment::{apply_geometric_augment, AugmentParams, ColorJitter, GeometricDraw};
pub use crop::{crop_region, crop_side, extract, CropWindow, Frame};

/// Default maximum frame gap.
pub const DEFAULT_DELTA: usize = 150;

/// Frames of one sequence with a box per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

impl SequenceRecord {
    pub fn new(name: impl Into<String>, frames: Vec<Frame>, boxes: Vec<BBox>) -> Result<Self> {
        let name = name.into();
        if frames.len() != boxes.len() {
            return Err(Error::Data(format!(
                "sequence `{name}` has {} frames but {} boxes",
                frames.len(),
                boxes.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::Data(format!("sequence `{name}` needs at least 2 frames")));
        }
        Ok(Self { name, frames, boxes })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Sampled frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TupleIndices {
    /// Static template frame.
    pub i: usize,
    /// Dynamic search-region frame.
    pub k: usize,
    /// Current search-region frame.
    pub j: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTuple {
    /// `I_T`, template-sized.
    pub template: ImagePatch,
    /// `I_D`, template-sized center of `I_S`.
    pub dynamic_template: ImagePatch,
    /// `I_S`, search-sized.
    pub dynamic_search: ImagePatch,
    /// `I_t`, search-sized and augmented.
    pub search: ImagePatch,
    /// Target box in `I_t` pixel coordinates.
    pub gt: BBox,
    /// `[1, 16, 16]` binary classification target.
    pub target: Array3<f64>,
    pub indices: TupleIndices,
}

/// Draws `i` uniformly, `j` in `[i, min(i + delta, last)]`, `k` in `[i, j]`.
pub fn sample_indices<R: Rng>(len: usize, delta: usize, rng: &mut R) -> Result<TupleIndices> {
    if len < 2 {
        return Err(Error::Data(format!("cannot sample from a {len}-frame sequence")));
    }
    let i = rng.random_range(0..len);
    let j = rng.random_range(i..=(i + delta).min(len - 1));
    let k = rng.random_range(i..=j);
    Ok(TupleIndices { i, k, j })
}

/// One training tuple from `record`.
pub fn sample_training_tuple<R: Rng>(
    record: &SequenceRecord,
    delta: usize,
    aug: &AugmentParams,
    rng: &mut R,
) -> Result<TrainingTuple> {
    let idx = sample_indices(record.len(), delta, rng)?;
    build_tuple(record, idx, aug, rng)
}

/// Crops a tuple at fixed indices; all randomness is augmentation.
pub fn build_tuple<R: Rng>(
    record: &SequenceRecord,
    idx: TupleIndices,
    aug: &AugmentParams,
    rng: &mut R,
) -> Result<TrainingTuple> {
    let TupleIndices { i, k, j } = idx;
    if i > k || k > j || j >= record.len() {
        return Err(Error::Data(format!("invalid tuple indices {idx:?}")));
    }

    let mut template =
        crop_region(&record.frames[i], &record.boxes[i], aug.template_offset, TEMPLATE_SIZE)?.into_pixels();

    let s_window = CropWindow::around(&record.boxes[k], aug.search_offset)?;
    let mut dynamic_search = extract(&record.frames[k], &s_window, SEARCH_SIZE)?.into_pixels();

    let t_window = apply_geometric_augment(
        CropWindow::around(&record.boxes[j], aug.search_offset)?,
        GeometricDraw::sample(rng, aug),
    );
    let mut search = extract(&record.frames[j], &t_window, SEARCH_SIZE)?.into_pixels();
    let gt = t_window.to_crop(&record.boxes[j], SEARCH_SIZE);

    ColorJitter::sample(rng, aug).apply(&mut template);
    ColorJitter::sample(rng, aug).apply(&mut dynamic_search);
    ColorJitter::sample(rng, aug).apply(&mut search);

    let dynamic_search = ImagePatch::new(dynamic_search)?;
    Ok(TrainingTuple {
        template: ImagePatch::new(template)?,
        // cut after jitter so the pair stays pixel-consistent
        dynamic_template: dynamic_search.center_template()?,
        dynamic_search,
        search: ImagePatch::new(search)?,
        target: classification_target_map(&gt, SEARCH_GRID, SEARCH_SIZE as f64),
        gt,
        indices: idx,
    })
}

/// Draws tuples from a pool of sequences, optionally weighted per sequence.
pub struct TupleSampler {
    pub delta: usize,
    pub aug: AugmentParams,
    rng: ChaCha8Rng,
    weights: Option<WeightedIndex<f64>>,
}

impl TupleSampler {
    pub fn new(delta: usize, aug: AugmentParams, seed: u64) -> Self {
        Self {
            delta,
            aug,
            rng: ChaCha8Rng::seed_from_u64(seed),
            weights: None,
        }
    }

    /// Relative sampling weight of each sequence, e.g. to mix sources.
    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        self.weights = Some(WeightedIndex::new(weights).map_err(|e| Error::Config(format!("sequence weights: {e}")))?);
        Ok(self)
    }

    pub fn sample(&mut self, records: &[SequenceRecord]) -> Result<TrainingTuple> {
        if records.is_empty() {
            return Err(Error::Data("no sequences to sample from".into()));
        }
        let r = match &self.weights {
            Some(w) => {
                let r = w.sample(&mut self.rng);
                if r >= records.len() {
                    return Err(Error::Config("more sequence weights than sequences".into()));
                }
                r
            }
            None => self.rng.random_range(0..records.len()),
        };
        sample_training_tuple(&records[r], self.delta, &self.aug, &mut self.rng)
    }

    pub fn batch(&mut self, records: &[SequenceRecord], n: usize) -> Result<Vec<TrainingTuple>> {
        (0..n).map(|_| self.sample(records)).collect()
    }
}

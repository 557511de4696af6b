//! Bags, segments and vocabularies, plus sampling, synthetic data and file I/O.

mod io;
mod sampling;
mod synthetic;

use ndarray::{s, Array2};

use crate::{Error, Result};

pub use io::{
    load_bags, load_plants, load_segments, load_vocabulary, save_bags, save_plants,
    save_segments, save_vocabulary,
};
pub use sampling::{eligible_range, sample_frames, SamplingScheme, EDGE_EXCLUSION};
pub use synthetic::{
    generate_synthetic_corpus, PlantedWindow, SyntheticConfig, SyntheticCorpus,
    SEGMENT_POSITIVE_OVERLAP,
};

/// Number of frames in an evaluation segment.
pub const SEGMENT_LEN: usize = 5;

/// A video: `K x D` frame features with bag-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub frames: Array2<f64>,
    /// Positive class ids, sorted and unique.
    pub labels: Vec<usize>,
}

impl Bag {
    pub fn new(id: impl Into<String>, frames: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::EmptyBag);
        }
        Ok(Bag {
            id: id.into(),
            frames,
            labels: normalize_labels(labels),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// A fixed-length window of a video with its own labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub start_index: usize,
    pub frames: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Segment {
    pub fn new(
        video_id: impl Into<String>,
        start_index: usize,
        frames: Array2<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if frames.nrows() != SEGMENT_LEN {
            return Err(Error::shape("segment frames", SEGMENT_LEN, frames.nrows()));
        }
        Ok(Segment {
            video_id: video_id.into(),
            start_index,
            frames,
            labels: normalize_labels(labels),
        })
    }

    /// Identifier used in prediction sets and submissions.
    pub fn id(&self) -> String {
        format!("{}:{}", self.video_id, self.start_index)
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Cuts `SEGMENT_LEN` frames out of a bag starting at `start_index`.
pub fn extract_segment(bag: &Bag, start_index: usize, labels: Option<Vec<usize>>) -> Result<Segment> {
    let k = bag.num_frames();
    if start_index + SEGMENT_LEN > k {
        return Err(Error::SegmentOutOfRange {
            start: start_index,
            len: SEGMENT_LEN,
            frames: k,
        });
    }
    let frames = bag
        .frames
        .slice(s![start_index..start_index + SEGMENT_LEN, ..])
        .to_owned();
    Segment::new(bag.id.clone(), start_index, frames, labels.unwrap_or_default())
}

/// Class count, the subset of classes evaluated at segment level, and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    class_count: usize,
    localizable: Vec<bool>,
    class_weights: Vec<f64>,
}

/// Default loss weight of localizable classes; every other class gets 1.
pub const DEFAULT_LOCALIZABLE_WEIGHT: f64 = 3.0;

impl Vocabulary {
    pub fn new(localizable: Vec<bool>, class_weights: Vec<f64>) -> Result<Self> {
        let n = localizable.len();
        if n == 0 {
            return Err(Error::Config("vocabulary needs at least one class".into()));
        }
        if class_weights.len() != n {
            return Err(Error::shape("class weights", n, class_weights.len()));
        }
        if !localizable.iter().any(|&l| l) {
            return Err(Error::Config("at least one class must be localizable".into()));
        }
        if let Some(w) = class_weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!("class weights must be positive, got {w}")));
        }
        Ok(Vocabulary {
            class_count: n,
            localizable,
            class_weights,
        })
    }

    /// Marks `localizable` as the segment-evaluated subset and weights those classes by `factor`.
    pub fn with_weight_factor(class_count: usize, localizable: &[usize], factor: f64) -> Result<Self> {
        let mut mask = vec![false; class_count];
        for &c in localizable {
            if c >= class_count {
                return Err(Error::Config(format!(
                    "localizable class {c} outside vocabulary of {class_count}"
                )));
            }
            mask[c] = true;
        }
        let weights = mask.iter().map(|&l| if l { factor } else { 1.0 }).collect();
        Vocabulary::new(mask, weights)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn is_localizable(&self, class_id: usize) -> bool {
        self.localizable.get(class_id).copied().unwrap_or(false)
    }

    pub fn localizable_classes(&self) -> Vec<usize> {
        (0..self.class_count).filter(|&c| self.localizable[c]).collect()
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    /// Multi-hot target vector for a sorted label list.
    pub fn multi_hot(&self, labels: &[usize]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.class_count];
        for &c in labels {
            if c >= self.class_count {
                return Err(Error::Config(format!(
                    "label {c} outside vocabulary of {}",
                    self.class_count
                )));
            }
            y[c] = 1.0;
        }
        Ok(y)
    }
}

fn normalize_labels(mut labels: Vec<usize>) -> Vec<usize> {
    labels.sort_unstable();
    labels.dedup();
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp_bag(k: usize, d: usize) -> Bag {
        let frames = Array2::from_shape_fn((k, d), |(i, j)| (i * d + j) as f64);
        Bag::new("v", frames, vec![1]).unwrap()
    }

    #[test]
    fn whole_bag_segment() {
        let bag = ramp_bag(5, 3);
        let seg = extract_segment(&bag, 0, None).unwrap();
        assert_eq!(seg.frames, bag.frames);
        assert!(seg.labels.is_empty());
    }

    #[test]
    fn segment_out_of_range() {
        let bag = ramp_bag(10, 2);
        assert!(matches!(
            extract_segment(&bag, 6, None),
            Err(Error::SegmentOutOfRange { start: 6, .. })
        ));
    }

    #[test]
    fn segment_is_half_open_slice() {
        let bag = ramp_bag(10, 2);
        let seg = extract_segment(&bag, 3, Some(vec![2, 0, 2])).unwrap();
        for (r, row) in seg.frames.outer_iter().enumerate() {
            assert_eq!(row, bag.frames.row(3 + r));
        }
        assert_eq!(seg.frames.row(4), bag.frames.row(7));
        assert_eq!(seg.labels, vec![0, 2]);
        assert_eq!(seg.id(), "v:3");
    }

    #[test]
    fn empty_bag_rejected() {
        assert!(matches!(
            Bag::new("e", Array2::zeros((0, 3)), vec![]),
            Err(Error::EmptyBag)
        ));
    }

    #[test]
    fn segment_needs_five_frames() {
        assert!(Segment::new("v", 0, Array2::zeros((4, 2)), vec![]).is_err());
    }

    #[test]
    fn vocabulary_weights() {
        let v = Vocabulary::with_weight_factor(4, &[1, 3], 3.0).unwrap();
        assert_eq!(v.class_weights(), &[1.0, 3.0, 1.0, 3.0]);
        assert_eq!(v.localizable_classes(), vec![1, 3]);
        assert_eq!(v.multi_hot(&[0, 3]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        assert!(v.multi_hot(&[4]).is_err());
        assert!(Vocabulary::with_weight_factor(3, &[], 3.0).is_err());
        assert!(Vocabulary::new(vec![true, false], vec![1.0, 0.0]).is_err());
    }
}

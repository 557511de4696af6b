//! Planted-segment corpus: unit-variance noise frames with class prototype
//! directions added inside known windows, so localization ground truth is
//! available for every generated video.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eligible_range, extract_segment, Bag, Segment, Vocabulary, SEGMENT_LEN};
use crate::{Error, Result};

/// A segment is positive for a class when it shares at least this many frames
/// with a planted window of that class.
pub const SEGMENT_POSITIVE_OVERLAP: usize = 3;

const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub class_count: usize,
    pub feature_dim: usize,
    /// Videos in the training and test splits.
    pub bags_per_split: usize,
    /// Videos whose segments form the labeled fine-tuning set.
    pub labeled_bags: usize,
    /// Inclusive range of video lengths.
    pub frames_per_bag: (usize, usize),
    /// Inclusive range of positive labels per video.
    pub labels_per_bag: (usize, usize),
    /// Norm of the prototype added to planted frames, relative to unit noise.
    pub prototype_strength: f64,
    pub planted_segment_length: usize,
    /// Randomly placed segments drawn per labeled or test video.
    pub segments_per_bag: usize,
    /// The first `localizable_count` classes form the segment-evaluated subset.
    pub localizable_count: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            class_count: 10,
            feature_dim: 16,
            bags_per_split: 200,
            labeled_bags: 100,
            frames_per_bag: (60, 120),
            labels_per_bag: (1, 3),
            prototype_strength: 5.0,
            planted_segment_length: 5,
            segments_per_bag: 5,
            localizable_count: 10,
            rng_seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return fail(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.feature_dim < 2 {
            return fail(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.bags_per_split == 0 || self.labeled_bags == 0 || self.segments_per_bag == 0 {
            return fail("bag and segment counts must be >= 1".into());
        }
        let (lo, hi) = self.labels_per_bag;
        if lo == 0 || lo > hi || hi > self.class_count {
            return fail(format!(
                "labels_per_bag must satisfy 1 <= min <= max <= class_count, got ({lo}, {hi})"
            ));
        }
        if !(self.prototype_strength.is_finite() && self.prototype_strength > 0.0) {
            return fail(format!(
                "prototype_strength must be positive, got {}",
                self.prototype_strength
            ));
        }
        if self.planted_segment_length == 0 {
            return fail("planted_segment_length must be >= 1".into());
        }
        let (kmin, kmax) = self.frames_per_bag;
        if kmin > kmax {
            return fail(format!("frames_per_bag min {kmin} exceeds max {kmax}"));
        }
        let cramped = (kmin..=kmax).find(|&k| {
            k < SEGMENT_LEN || eligible_range(k).len() < self.planted_segment_length
        });
        if let Some(k) = cramped {
            return fail(format!(
                "a {k}-frame video leaves no room for a {}-frame window",
                self.planted_segment_length.max(SEGMENT_LEN)
            ));
        }
        if self.localizable_count == 0 || self.localizable_count > self.class_count {
            return fail(format!(
                "localizable_count must be in 1..={}, got {}",
                self.class_count, self.localizable_count
            ));
        }
        Ok(())
    }
}

/// Where a class prototype was injected into a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedWindow {
    pub class_id: usize,
    pub start: usize,
    pub len: usize,
}

impl PlantedWindow {
    pub fn overlap(&self, start: usize, len: usize) -> usize {
        let lo = self.start.max(start);
        let hi = (self.start + self.len).min(start + len);
        hi.saturating_sub(lo)
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.start + self.len).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocabulary: Vocabulary,
    /// Unit-norm class directions, one row per class.
    pub prototypes: Array2<f64>,
    /// Weakly labeled videos for bag-level training.
    pub train_bags: Vec<Bag>,
    /// Segments with exact labels for fine-tuning.
    pub labeled_segments: Vec<Segment>,
    /// Held-out videos the test segments were cut from.
    pub test_bags: Vec<Bag>,
    pub test_segments: Vec<Segment>,
    /// Planted windows keyed by video id, for every generated video.
    pub plants: BTreeMap<String, Vec<PlantedWindow>>,
}

#[derive(Clone, Copy)]
enum Split {
    Train = 1,
    Labeled = 2,
    Test = 3,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Labeled => "labeled",
            Split::Test => "test",
        }
    }
}

/// Every random draw comes from a ChaCha stream keyed by (split, bag index),
/// so the output depends only on the config and is independent of threading.
pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let prototypes = draw_prototypes(config);
    let localizable: Vec<usize> = (0..config.localizable_count).collect();
    let vocabulary = Vocabulary::with_weight_factor(
        config.class_count,
        &localizable,
        super::DEFAULT_LOCALIZABLE_WEIGHT,
    )?;

    let generate_split = |split: Split, count: usize| -> Vec<(Bag, Vec<PlantedWindow>, ChaCha8Rng)> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(config.rng_seed, split, i);
                let (bag, windows) = plant_bag(config, &prototypes, split, i, &mut rng);
                (bag, windows, rng)
            })
            .collect()
    };

    let mut plants = BTreeMap::new();

    let train_bags: Vec<Bag> = generate_split(Split::Train, config.bags_per_split)
        .into_iter()
        .map(|(bag, windows, _)| {
            plants.insert(bag.id.clone(), windows);
            bag
        })
        .collect();

    let mut labeled_segments = Vec::new();
    for (bag, windows, mut rng) in generate_split(Split::Labeled, config.labeled_bags) {
        let mut starts: Vec<usize> = windows
            .iter()
            .map(|w| jittered_start(w, bag.num_frames(), &mut rng))
            .collect();
        starts.extend(uniform_starts(bag.num_frames(), config.segments_per_bag, &mut rng));
        starts.sort_unstable();
        starts.dedup();
        for start in starts {
            let labels = segment_labels(&windows, start);
            labeled_segments.push(extract_segment(&bag, start, Some(labels))?);
        }
        plants.insert(bag.id.clone(), windows);
    }

    let mut test_bags = Vec::new();
    let mut test_segments = Vec::new();
    for (bag, windows, mut rng) in generate_split(Split::Test, config.bags_per_split) {
        let mut starts = uniform_starts(bag.num_frames(), config.segments_per_bag, &mut rng);
        starts.sort_unstable();
        for start in starts {
            let labels = segment_labels(&windows, start);
            test_segments.push(extract_segment(&bag, start, Some(labels))?);
        }
        plants.insert(bag.id.clone(), windows);
        test_bags.push(bag);
    }

    Ok(SyntheticCorpus {
        vocabulary,
        prototypes,
        train_bags,
        labeled_segments,
        test_bags,
        test_segments,
        plants,
    })
}

/// Classes whose planted window covers at least `SEGMENT_POSITIVE_OVERLAP` frames of the segment.
pub(crate) fn segment_labels(windows: &[PlantedWindow], start: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = windows
        .iter()
        .filter(|w| w.overlap(start, SEGMENT_LEN) >= SEGMENT_POSITIVE_OVERLAP)
        .map(|w| w.class_id)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

fn stream_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

fn draw_prototypes(config: &SyntheticConfig) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(0);
    let mut protos = Array2::zeros((config.class_count, config.feature_dim));
    for mut row in protos.outer_iter_mut() {
        loop {
            row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row /= norm;
                break;
            }
        }
    }
    protos
}

fn plant_bag(
    config: &SyntheticConfig,
    prototypes: &Array2<f64>,
    split: Split,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> (Bag, Vec<PlantedWindow>) {
    let (kmin, kmax) = config.frames_per_bag;
    let k = rng.random_range(kmin..=kmax);
    let (lmin, lmax) = config.labels_per_bag;
    let label_count = rng.random_range(lmin..=lmax);
    let mut labels = index::sample(rng, config.class_count, label_count).into_vec();
    labels.sort_unstable();

    let len = config.planted_segment_length;
    let eligible = eligible_range(k);
    let last_start = eligible.end - len;
    let mut windows: Vec<PlantedWindow> = Vec::with_capacity(labels.len());
    for &class_id in &labels {
        let mut start = rng.random_range(eligible.start..=last_start);
        for _ in 0..PLACEMENT_ATTEMPTS {
            if windows.iter().all(|w| w.overlap(start, len) == 0) {
                break;
            }
            start = rng.random_range(eligible.start..=last_start);
        }
        windows.push(PlantedWindow { class_id, start, len });
    }

    let mut frames =
        Array2::from_shape_simple_fn((k, config.feature_dim), || rng.sample::<f64, _>(StandardNormal));
    for w in &windows {
        let signal: Array1<f64> = &prototypes.row(w.class_id) * config.prototype_strength;
        for t in w.start..w.start + w.len {
            let mut row = frames.row_mut(t);
            row += &signal;
        }
    }
    let id = format!("{}-{index:05}", split.prefix());
    let bag = Bag::new(id, frames, labels).expect("k >= 1 by validation");
    (bag, windows)
}

/// Segment start shifted by at most one frame from the window start, so the
/// segment keeps at least four frames of the window.
fn jittered_start(window: &PlantedWindow, num_frames: usize, rng: &mut ChaCha8Rng) -> usize {
    let shift = rng.random_range(0..3usize);
    let start = (window.start + shift).saturating_sub(1);
    start.min(num_frames - SEGMENT_LEN)
}

fn uniform_starts(num_frames: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let positions = num_frames - SEGMENT_LEN + 1;
    index::sample(rng, positions, count.min(positions)).into_vec()
}

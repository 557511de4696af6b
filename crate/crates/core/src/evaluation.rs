//! Segment-level ranking metric, prediction sets, ensembles and submission files.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Segment, Vocabulary};
use crate::fsutil::{read_to_string, write_atomic};
use crate::training::{forward, ModelParams};
use crate::{Error, Result};

/// Rank cutoff used by the original challenge.
pub const DEFAULT_K_S: usize = 100_000;
/// Allowed deviation of ensemble weights from summing to one.
pub const SIMPLEX_WEIGHT_TOLERANCE: f64 = 1e-9;

const SUBMISSION_HEADER: &str = "class_id,segment_id,score";

/// Scores keyed by `(segment_id, class_id)`; keys are unique by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    scores: BTreeMap<(String, usize), f64>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize, f64)>,
        S: Into<String>,
    {
        let mut set = PredictionSet::new();
        for (segment_id, class_id, score) in entries {
            set.insert(segment_id, class_id, score)?;
        }
        Ok(set)
    }

    /// Rejects duplicates, scores outside `[0, 1]` and ids that cannot be written as CSV fields.
    pub fn insert(&mut self, segment_id: impl Into<String>, class_id: usize, score: f64) -> Result<()> {
        let segment_id = segment_id.into();
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Config(format!(
                "score for segment `{segment_id}`, class {class_id} must lie in [0, 1], got {score}"
            )));
        }
        if segment_id.is_empty() || segment_id.contains([',', '"', '\n', '\r']) {
            return Err(Error::Config(format!(
                "segment id `{segment_id}` must be nonempty without commas, quotes or newlines"
            )));
        }
        match self.scores.entry((segment_id, class_id)) {
            std::collections::btree_map::Entry::Occupied(e) => Err(Error::DuplicatePrediction {
                segment_id: e.key().0.clone(),
                class_id,
            }),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(score);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, segment_id: &str, class_id: usize) -> Option<f64> {
        self.scores.get(&(segment_id.to_string(), class_id)).copied()
    }

    /// `(segment_id, class_id, score)` in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, f64)> {
        self.scores.iter().map(|((s, c), v)| (s.as_str(), *c, *v))
    }

    fn same_keys(&self, other: &PredictionSet) -> bool {
        self.scores.len() == other.scores.len() && self.scores.keys().eq(other.scores.keys())
    }
}

/// Positive `(segment_id, class_id)` pairs; every other pair is a negative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    positives: BTreeSet<(String, usize)>,
}

impl GroundTruth {
    pub fn new<I, S>(positives: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        GroundTruth {
            positives: positives.into_iter().map(|(s, c)| (s.into(), c)).collect(),
        }
    }

    /// Each segment's labels are its positives.
    pub fn from_segments(segments: &[Segment]) -> Self {
        GroundTruth::new(
            segments
                .iter()
                .flat_map(|s| s.labels.iter().map(move |&c| (s.id(), c))),
        )
    }

    pub fn is_positive(&self, segment_id: &str, class_id: usize) -> bool {
        self.positives.contains(&(segment_id.to_string(), class_id))
    }

    /// `N_c` for every class with at least one positive.
    pub fn positive_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for (_, c) in &self.positives {
            *counts.entry(*c).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub k_s: usize,
    /// Classes eligible for averaging; `None` admits every class in the ground truth.
    pub classes: Option<BTreeSet<usize>>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            k_s: DEFAULT_K_S,
            classes: None,
        }
    }
}

impl MetricConfig {
    /// Averages over the vocabulary's localizable classes.
    pub fn for_vocabulary(vocab: &Vocabulary, k_s: usize) -> Self {
        MetricConfig {
            k_s,
            classes: Some(vocab.localizable_classes().into_iter().collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub n_c: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub per_class: Vec<ClassAp>,
}

/// `sum_{k <= K_s} P(k) rel(k) / N_c` over a list already sorted by descending score.
pub fn average_precision_at_k(ranked_rel: &[bool], n_c: usize, k_s: usize) -> Result<f64> {
    if n_c == 0 {
        return Err(Error::NoPositives);
    }
    if k_s == 0 {
        return Err(Error::Config("K_s must be >= 1".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_rel.iter().take(k_s).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n_c as f64)
}

/// Mean of per-class average precision over classes with `N_c >= 1` in the configured subset.
pub fn map_at_k(pred: &PredictionSet, gt: &GroundTruth, cfg: &MetricConfig) -> Result<MetricReport> {
    if cfg.k_s == 0 {
        return Err(Error::Config("K_s must be >= 1".into()));
    }
    let counts: Vec<(usize, usize)> = gt
        .positive_counts()
        .into_iter()
        .filter(|(c, _)| cfg.classes.as_ref().is_none_or(|set| set.contains(c)))
        .collect();
    let mut by_class: BTreeMap<usize, Vec<(&str, f64)>> = BTreeMap::new();
    for (segment, class, score) in pred.iter() {
        by_class.entry(class).or_default().push((segment, score));
    }
    let per_class = counts
        .par_iter()
        .map(|&(class_id, n_c)| {
            let mut ranked = by_class.get(&class_id).cloned().unwrap_or_default();
            ranked.sort_by(|a, b| rank_order(a.1, a.0, b.1, b.0));
            let rel: Vec<bool> = ranked
                .iter()
                .take(cfg.k_s)
                .map(|(s, _)| gt.is_positive(s, class_id))
                .collect();
            let ap = average_precision_at_k(&rel, n_c, cfg.k_s)?;
            Ok(ClassAp { class_id, ap, n_c })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(MetricReport { map, per_class })
}

/// Descending score, then ascending segment id.
fn rank_order(score_a: f64, seg_a: &str, score_b: f64, seg_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| seg_a.cmp(seg_b))
}

/// Scores every segment for every localizable class.
pub fn predict_segments(model: &ModelParams, segments: &[Segment], vocab: &Vocabulary) -> Result<PredictionSet> {
    if vocab.class_count() != model.class_count() {
        return Err(Error::shape("vocabulary classes", model.class_count(), vocab.class_count()));
    }
    let classes = vocab.localizable_classes();
    let scored = segments
        .par_iter()
        .map(|s| forward(model, s.frames.view()).map(|out| (s.id(), out.scores)))
        .collect::<Result<Vec<_>>>()?;
    let mut set = PredictionSet::new();
    for (id, scores) in scored {
        for &c in &classes {
            set.insert(id.clone(), c, scores.0[c])?;
        }
    }
    Ok(set)
}

/// Per-key convex combination `sum_j w_j s_j`.
pub fn ensemble_blend(sets: &[PredictionSet], weights: &[f64]) -> Result<PredictionSet> {
    let first = sets.first().ok_or(Error::Empty("prediction set list"))?;
    if weights.len() != sets.len() {
        return Err(Error::shape("ensemble weights", sets.len(), weights.len()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(format!("ensemble weights must be nonnegative, got {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_WEIGHT_TOLERANCE {
        return Err(Error::NotSimplex(total));
    }
    if sets.iter().any(|s| !s.same_keys(first)) {
        return Err(Error::KeyMismatch);
    }
    let mut scores = BTreeMap::new();
    for key in first.scores.keys() {
        let parts: Vec<f64> = sets.iter().map(|s| s.scores[key]).collect();
        let blended: f64 = parts.iter().zip(weights).map(|(s, w)| s * w).sum();
        let lo = parts.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = parts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // keeps rounding from leaving the convex hull
        scores.insert(key.clone(), blended.clamp(lo, hi));
    }
    Ok(PredictionSet { scores })
}

/// Rows ordered by class ascending, score descending, segment id ascending.
pub fn submission_csv(pred: &PredictionSet) -> String {
    let mut rows: Vec<(usize, &str, f64)> = pred.iter().map(|(s, c, v)| (c, s, v)).collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| rank_order(a.2, a.1, b.2, b.1)));
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(SUBMISSION_HEADER);
    out.push('\n');
    for (c, s, v) in rows {
        // `{}` on f64 prints the shortest string that parses back to the same value
        let _ = writeln!(out, "{c},{s},{v}");
    }
    out
}

pub fn write_submission(pred: &PredictionSet, path: &Path) -> Result<()> {
    write_atomic(path, submission_csv(pred).as_bytes())
}

pub fn read_submission(path: &Path) -> Result<PredictionSet> {
    let text = read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SUBMISSION_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header `{SUBMISSION_HEADER}`"))),
    }
    let mut set = PredictionSet::new();
    for (i, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [class, segment, score] = fields[..] else {
            return Err(parse_err(i + 1, format!("expected 3 fields, got {}", fields.len())));
        };
        let class: usize = class
            .parse()
            .map_err(|e| parse_err(i + 1, format!("class_id `{class}`: {e}")))?;
        let score: f64 = score
            .parse()
            .map_err(|e| parse_err(i + 1, format!("score `{score}`: {e}")))?;
        set.insert(segment, class, score)
            .map_err(|e| parse_err(i + 1, e.to_string()))?;
    }
    Ok(set)
}

pub fn save_metric_report(path: &Path, report: &MetricReport) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

pub fn load_metric_report(path: &Path) -> Result<MetricReport> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}

//! Line-delimited JSON dataset files.
//!
//! Bag line: `{"id": str, "labels": [int], "frames": [[float; D]; K]}`.
//! Segment line: `{"video_id": str, "start": int, "labels": [int], "frames": [[float; D]; 5]}`.
//! Vocabulary document: `{"n": int, "localizable": [int], "weights": [float; n]}`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Bag, PlantedWindow, Segment, Vocabulary, SEGMENT_LEN};
use crate::fsutil::{read_to_string, write_atomic};
use crate::serde_arrays::rows_to_array;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    id: String,
    labels: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    video_id: String,
    start: usize,
    labels: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyRecord {
    n: usize,
    localizable: Vec<usize>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantsRecord {
    id: String,
    windows: Vec<PlantedWindow>,
}

fn matrix_rows(frames: &Array2<f64>) -> Vec<Vec<f64>> {
    frames.outer_iter().map(|r| r.to_vec()).collect()
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Parses every non-blank line, tagging failures with the 1-based line number.
fn read_lines<T, U>(path: &Path, mut convert: impl FnMut(T) -> std::result::Result<U, String>) -> Result<Vec<U>>
where
    T: DeserializeOwned,
{
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: T = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(convert(record).map_err(parse_err)?);
    }
    Ok(out)
}

fn frames_from_rows(rows: Vec<Vec<f64>>, expected_dim: &mut Option<usize>) -> std::result::Result<Array2<f64>, String> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite frame value".into());
    }
    let frames = rows_to_array(rows)?;
    match *expected_dim {
        Some(d) if d != frames.ncols() => {
            return Err(format!(
                "feature dimension {} differs from earlier records ({d})",
                frames.ncols()
            ))
        }
        _ => *expected_dim = Some(frames.ncols()),
    }
    Ok(frames)
}

pub fn save_bags(path: &Path, bags: &[Bag]) -> Result<()> {
    write_lines(
        path,
        bags.iter().map(|b| BagRecord {
            id: b.id.clone(),
            labels: b.labels.clone(),
            frames: matrix_rows(&b.frames),
        }),
    )
}

pub fn load_bags(path: &Path) -> Result<Vec<Bag>> {
    let mut dim = None;
    read_lines(path, |r: BagRecord| {
        let frames = frames_from_rows(r.frames, &mut dim)
            .map_err(|m| format!("bag `{}`: {m}", r.id))?;
        Bag::new(r.id.clone(), frames, r.labels).map_err(|e| format!("bag `{}`: {e}", r.id))
    })
}

pub fn save_segments(path: &Path, segments: &[Segment]) -> Result<()> {
    write_lines(
        path,
        segments.iter().map(|s| SegmentRecord {
            video_id: s.video_id.clone(),
            start: s.start_index,
            labels: s.labels.clone(),
            frames: matrix_rows(&s.frames),
        }),
    )
}

pub fn load_segments(path: &Path) -> Result<Vec<Segment>> {
    let mut dim = None;
    read_lines(path, |r: SegmentRecord| {
        let name = format!("segment `{}:{}`", r.video_id, r.start);
        if r.frames.len() != SEGMENT_LEN {
            return Err(format!(
                "{name}: has {} frames, segments have exactly {SEGMENT_LEN}",
                r.frames.len()
            ));
        }
        let frames = frames_from_rows(r.frames, &mut dim).map_err(|m| format!("{name}: {m}"))?;
        Segment::new(r.video_id, r.start, frames, r.labels).map_err(|e| format!("{name}: {e}"))
    })
}

pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let record = VocabularyRecord {
        n: vocab.class_count(),
        localizable: vocab.localizable_classes(),
        weights: vocab.class_weights().to_vec(),
    };
    let mut text = serde_json::to_string(&record)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = read_to_string(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let r: VocabularyRecord = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if r.weights.len() != r.n {
        return Err(parse_err(format!("{} weights for {} classes", r.weights.len(), r.n)));
    }
    let mut mask = vec![false; r.n];
    for c in r.localizable {
        *mask
            .get_mut(c)
            .ok_or_else(|| parse_err(format!("localizable class {c} outside vocabulary")))? = true;
    }
    Vocabulary::new(mask, r.weights).map_err(|e| parse_err(e.to_string()))
}

pub fn save_plants(path: &Path, plants: &BTreeMap<String, Vec<PlantedWindow>>) -> Result<()> {
    write_lines(
        path,
        plants.iter().map(|(id, w)| PlantsRecord {
            id: id.clone(),
            windows: w.clone(),
        }),
    )
}

pub fn load_plants(path: &Path) -> Result<BTreeMap<String, Vec<PlantedWindow>>> {
    Ok(read_lines(path, |r: PlantsRecord| Ok((r.id, r.windows)))?
        .into_iter()
        .collect())
}

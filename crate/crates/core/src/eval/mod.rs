//! Benchmark metrics, aggregation and dataset manifests.

mod dataset;
mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{load_manifest, DatasetManifest, Layout, ManifestOptions, ObjectInfo, SequenceEntry};
pub use metrics::{boundary_f, boundary_map, jaccard, tolerance_pixels, DEFAULT_BOUNDARY_TOLERANCE};

use crate::error::{Error, Result};
use crate::io::read_label_png;
use crate::mask::HardMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub object: u8,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMean {
    pub sequence: String,
    pub object: u8,
    pub frames: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unseen: Option<bool>,
}

/// Means over objects, each object first averaged over its scored frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "J&F_m")]
    pub jf_m: f64,
    #[serde(rename = "J_m")]
    pub j_m: f64,
    #[serde(rename = "F_m")]
    pub f_m: f64,
    #[serde(rename = "J_s", skip_serializing_if = "Option::is_none", default)]
    pub j_s: Option<f64>,
    #[serde(rename = "F_s", skip_serializing_if = "Option::is_none", default)]
    pub f_s: Option<f64>,
    #[serde(rename = "J_u", skip_serializing_if = "Option::is_none", default)]
    pub j_u: Option<f64>,
    #[serde(rename = "F_u", skip_serializing_if = "Option::is_none", default)]
    pub f_u: Option<f64>,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence: String,
    pub scores: Vec<FrameScore>,
    pub objects: Vec<ObjectMean>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub summary: Summary,
    pub sequences: Vec<SequenceResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Summary over object means. Objects are sorted before summation so the
/// result does not depend on input order.
pub fn summarize(objects: &[ObjectMean]) -> Result<Summary> {
    let mut sorted: Vec<&ObjectMean> = objects.iter().collect();
    sorted.sort_by(|a, b| (&a.sequence, a.object).cmp(&(&b.sequence, b.object)));
    let j_m = mean(sorted.iter().map(|o| o.j))
        .ok_or_else(|| Error::Dataset("no scored objects".into()))?;
    let f_m = mean(sorted.iter().map(|o| o.f)).unwrap_or(0.0);
    let tagged = sorted.iter().any(|o| o.unseen.is_some());
    let split = |unseen: bool, pick: fn(&ObjectMean) -> f64| {
        if !tagged {
            return None;
        }
        mean(sorted.iter().filter(|o| o.unseen == Some(unseen)).map(|o| pick(o)))
    };
    Ok(Summary {
        jf_m: (j_m + f_m) / 2.0,
        j_m,
        f_m,
        j_s: split(false, |o| o.j),
        f_s: split(false, |o| o.f),
        j_u: split(true, |o| o.j),
        f_u: split(true, |o| o.f),
        objects: sorted.len(),
    })
}

/// Per-object means of `scores`, skipping each object's first annotated
/// frame (it is the input) and anything before it.
pub fn aggregate(sequence: &str, scores: &[FrameScore], objects: &[ObjectInfo]) -> Result<SequenceResult> {
    let mut kept: Vec<FrameScore> = scores
        .iter()
        .filter(|s| {
            objects
                .iter()
                .any(|o| o.id == s.object && s.frame > o.first_frame)
        })
        .copied()
        .collect();
    kept.sort_by_key(|s| (s.frame, s.object));
    let mut means = Vec::new();
    for o in objects {
        let own: Vec<&FrameScore> = kept.iter().filter(|s| s.object == o.id).collect();
        if own.is_empty() {
            continue;
        }
        means.push(ObjectMean {
            sequence: sequence.to_string(),
            object: o.id,
            frames: own.len(),
            j: mean(own.iter().map(|s| s.j)).unwrap_or(0.0),
            f: mean(own.iter().map(|s| s.f)).unwrap_or(0.0),
            unseen: o.unseen,
        });
    }
    let summary = summarize(&means)?;
    Ok(SequenceResult {
        sequence: sequence.to_string(),
        scores: kept,
        objects: means,
        summary,
    })
}

/// J and F of every listed object at one frame.
pub fn score_frame(pred: &HardMask, gt: &HardMask, frame: usize, objects: &[u8], tolerance: f64) -> Result<Vec<FrameScore>> {
    objects
        .iter()
        .map(|&o| {
            Ok(FrameScore {
                frame,
                object: o,
                j: jaccard(pred, gt, o)?,
                f: boundary_f(pred, gt, o, tolerance)?,
            })
        })
        .collect()
}

/// Frames of `entry` that need a prediction: annotated frames after the
/// first appearance of at least one object.
fn scored_frames(entry: &SequenceEntry) -> Vec<usize> {
    entry
        .annotations
        .keys()
        .copied()
        .filter(|&i| entry.objects.iter().any(|o| i > o.first_frame))
        .collect()
}

fn missing_in(entry: &SequenceEntry, pred_root: &Path) -> Vec<String> {
    scored_frames(entry)
        .into_iter()
        .filter_map(|i| {
            let stem = entry.frame_stem(i);
            let p = pred_root.join(&entry.name).join(format!("{stem}.png"));
            (!p.is_file()).then(|| format!("{}/{stem}", entry.name))
        })
        .collect()
}

/// Scores predictions stored as `<pred_root>/<sequence>/<frame>.png`.
pub fn evaluate_sequence(entry: &SequenceEntry, pred_root: &Path, tolerance: f64) -> Result<SequenceResult> {
    let missing = missing_in(entry, pred_root);
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut scores = Vec::new();
    for i in scored_frames(entry) {
        let gt = read_label_png(&entry.annotations[&i])?;
        let stem = entry.frame_stem(i);
        let pred = read_label_png(&pred_root.join(&entry.name).join(format!("{stem}.png")))?;
        let active: Vec<u8> = entry
            .objects
            .iter()
            .filter(|o| i > o.first_frame)
            .map(|o| o.id)
            .collect();
        scores.extend(score_frame(&pred, &gt, i, &active, tolerance)?);
    }
    aggregate(&entry.name, &scores, &entry.objects)
}

/// Scores every sequence of `manifest`. All missing predictions are
/// reported together before any scoring happens.
pub fn evaluate_dataset(manifest: &DatasetManifest, pred_root: &Path, tolerance: f64) -> Result<DatasetResult> {
    let missing: Vec<String> = manifest
        .sequences
        .iter()
        .flat_map(|s| missing_in(s, pred_root))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let sequences = manifest
        .sequences
        .par_iter()
        .filter(|s| !scored_frames(s).is_empty())
        .map(|s| evaluate_sequence(s, pred_root, tolerance))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<ObjectMean> = sequences.iter().flat_map(|s| s.objects.clone()).collect();
    Ok(DatasetResult {
        summary: summarize(&all)?,
        sequences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub offset: usize,
    #[serde(rename = "J&F")]
    pub jf: f64,
    pub sequences: usize,
}

/// Mean J&F by frame offset from the first frame. A sequence's value at a
/// frame is the mean of its objects' (J + F) / 2 there.
pub fn per_frame_curve(results: &[SequenceResult]) -> Vec<CurvePoint> {
    let mut sorted: Vec<&SequenceResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in sorted {
        let mut frames: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &r.scores {
            let e = frames.entry(s.frame).or_default();
            e.0 += (s.j + s.f) / 2.0;
            e.1 += 1;
        }
        for (frame, (sum, n)) in frames {
            let e = acc.entry(frame).or_default();
            e.0 += sum / n as f64;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(offset, (sum, n))| CurvePoint {
            offset,
            jf: sum / n as f64,
            sequences: n,
        })
        .collect()
}

/// Writes `<dir>/<sequence>.csv` with one `frame,object,J,F` row per score.
pub fn write_sequence_csv(dir: &Path, result: &SequenceResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", result.sequence)))?;
    for s in &result.scores {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-sequence CSVs under `dir/sequences`, plus `summary.json` and
/// `curve.json`.
pub fn write_results(dir: &Path, result: &DatasetResult) -> Result<()> {
    for s in &result.sequences {
        write_sequence_csv(&dir.join("sequences"), s)?;
    }
    write_json(&dir.join("summary.json"), result)?;
    write_json(&dir.join("curve.json"), &per_frame_curve(&result.sequences))
}

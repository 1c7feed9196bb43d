//! Evaluation protocol: frame-skip pair selection, overlap scoring and
//! splitting, and per-split metric aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ConfidenceMask, FlowField, FlowResolution};

pub const SMALL_MAX: f64 = 0.5;
pub const LARGE_MIN: f64 = 0.75;

/// Overlap regime of an image pair; boundary scores land in `Medium`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapSplit {
    Small,
    Medium,
    Large,
}

impl fmt::Display for OverlapSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OverlapSplit::Small => "small",
            OverlapSplit::Medium => "medium",
            OverlapSplit::Large => "large",
        };
        f.write_str(s)
    }
}

/// One evaluated pair: identity, overlap regime, pose errors, image metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub scene_id: String,
    pub i1: usize,
    pub it: usize,
    pub i2: usize,
    pub overlap: f64,
    pub split: OverlapSplit,
    pub rot_err_deg: f64,
    pub trans_angular_deg: f64,
    pub trans_abs_m: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

/// Names and extractors of the metrics summarized per split.
pub const METRIC_NAMES: [&str; 7] = [
    "mse",
    "overlap",
    "psnr",
    "rot_err_deg",
    "ssim",
    "trans_abs_m",
    "trans_angular_deg",
];

fn metric_value(r: &PairRecord, name: &str) -> f64 {
    match name {
        "mse" => r.mse,
        "overlap" => r.overlap,
        "psnr" => r.psnr,
        "rot_err_deg" => r.rot_err_deg,
        "ssim" => r.ssim,
        "trans_abs_m" => r.trans_abs_m,
        "trans_angular_deg" => r.trans_angular_deg,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Average, median, and population standard deviation of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub avg: f64,
    pub median: f64,
    pub std: f64,
    pub count: usize,
}

impl MetricSummary {
    /// Sorts before accumulating so the summary is exactly
    /// permutation-invariant; the median of an even count is the lower of
    /// the two middle values.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("summary of zero values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len() as f64;
        let avg = sorted.iter().sum::<f64>() / n;
        let median = sorted[(sorted.len() - 1) / 2];
        let var = sorted.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / n;
        Ok(MetricSummary {
            avg,
            median,
            std: var.sqrt(),
            count: sorted.len(),
        })
    }
}

/// Summary of every metric over one split ("small"/"medium"/"large") or the
/// whole record set ("overall").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBlock {
    pub split: String,
    pub count: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// Benchmark triplet (context 1, target, context 2) by the frame-skip rule:
/// N is a third of the clip for short clips and pinned to 50 otherwise.
pub fn frame_skip_select(total_frames: usize) -> Result<(usize, usize, usize)> {
    if total_frames < 3 {
        return Err(Error::TooShort(total_frames));
    }
    let n = if total_frames < 100 { total_frames / 3 } else { 50 };
    Ok((0, n, 2 * n))
}

/// Combined overlap of a pair from its two directed covisibility ratios:
/// `1 / (o12^-1 + o21^-1 - 1)`, an intersection-over-union of the two views.
pub fn overlap_score(o12: f64, o21: f64) -> Result<f64> {
    for o in [o12, o21] {
        if !(o > 0.0 && o <= 1.0) {
            return Err(Error::DegenerateRatio(o));
        }
    }
    let score = 1.0 / (1.0 / o12 + 1.0 / o21 - 1.0);
    // The bound score <= min(o12, o21) holds exactly in real arithmetic;
    // clamping guards the last-ulp rounding of the reciprocals.
    Ok(score.min(o12).min(o21))
}

/// Threshold classification; scores exactly at a threshold are `Medium`.
pub fn classify(overlap: f64, small_max: f64, large_min: f64) -> OverlapSplit {
    if overlap < small_max {
        OverlapSplit::Small
    } else if overlap > large_min {
        OverlapSplit::Large
    } else {
        OverlapSplit::Medium
    }
}

/// Directed covisibility ratios from the matcher's own confidence masks:
/// each ratio is the confident fraction of that view's pixels.
pub fn pair_overlap_from_matcher(
    f_12: &FlowField,
    f_21: &FlowField,
    m_12: &ConfidenceMask,
    m_21: &ConfidenceMask,
) -> Result<(f64, f64)> {
    for (f, m) in [(f_12, m_12), (f_21, m_21)] {
        if f.resolution() != FlowResolution::Full {
            return Err(Error::ResolutionMismatch(
                "overlap wants full-resolution flow".into(),
            ));
        }
        if m.data.dim() != (f.h(), f.w()) {
            return Err(Error::ResolutionMismatch(format!(
                "mask {:?} disagrees with flow {}x{}",
                m.data.dim(),
                f.h(),
                f.w()
            )));
        }
    }
    Ok((m_12.mean(), m_21.mean()))
}

/// Per-split summaries in Small, Medium, Large order (absent splits are
/// omitted), followed by an "overall" block over every record.
pub fn summarize(records: &[PairRecord]) -> Result<Vec<SummaryBlock>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to summarize".into()));
    }
    let block = |split: String, rows: Vec<&PairRecord>| -> Result<SummaryBlock> {
        let mut metrics = BTreeMap::new();
        for name in METRIC_NAMES {
            let values: Vec<f64> = rows.iter().map(|r| metric_value(r, name)).collect();
            metrics.insert(name.to_string(), MetricSummary::of(&values)?);
        }
        Ok(SummaryBlock {
            split,
            count: rows.len(),
            metrics,
        })
    };
    let mut out = Vec::new();
    for split in [OverlapSplit::Small, OverlapSplit::Medium, OverlapSplit::Large] {
        let rows: Vec<&PairRecord> = records.iter().filter(|r| r.split == split).collect();
        if !rows.is_empty() {
            out.push(block(split.to_string(), rows)?);
        }
    }
    out.push(block("overall".to_string(), records.iter().collect())?);
    Ok(out)
}

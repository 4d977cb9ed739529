//! Tracking metrics, boxplot statistics and the adaptation-strength sweep.

mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::features::DoaTrack;

pub use sweep::{
    read_sweep_csv, run_u_sweep, summarize_sweep, sweep_boxplots, write_csv, MethodBoxplot,
    SweepData, SweepGrid, SweepRow, SweepRun, SweepSummary,
};

/// Frames with an absolute error below this count as accurate.
pub const ACC_THRESHOLD_DEG: f64 = 5.0;

/// Adaptation strengths compared in the sweep.
pub const PAPER_U_VALUES: [f64; 4] = [0.0001, 0.001, 0.01, 0.05];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub mae_deg: f64,
    pub acc_pct: f64,
    /// Absolute error of every active frame, degrees.
    pub frame_errors: Vec<f64>,
}

impl SequenceMetrics {
    pub fn from_errors(frame_errors: Vec<f64>) -> Result<Self> {
        if frame_errors.is_empty() {
            return Err(arg_err!("no active frames to score"));
        }
        let n = frame_errors.len() as f64;
        let mae_deg = frame_errors.iter().sum::<f64>() / n;
        let hits = frame_errors
            .iter()
            .filter(|e| **e < ACC_THRESHOLD_DEG)
            .count();
        Ok(SequenceMetrics {
            mae_deg,
            acc_pct: 100.0 * hits as f64 / n,
            frame_errors,
        })
    }
}

/// Errors over the frames `gt` marks active, as plain degree differences.
pub fn sequence_metrics(est: &DoaTrack, gt: &DoaTrack) -> Result<SequenceMetrics> {
    if est.len() != gt.len() {
        return Err(shape_err!(
            "estimate has {} frames, ground truth {}",
            est.len(),
            gt.len()
        ));
    }
    let mut errors = Vec::new();
    for l in 0..gt.len() {
        if !gt.active[l] {
            continue;
        }
        let truth = gt.azimuth[l]
            .ok_or_else(|| arg_err!("active ground-truth frame {l} has no azimuth"))?;
        let guess = est.azimuth[l].ok_or_else(|| arg_err!("no estimate for active frame {l}"))?;
        errors.push((guess - truth).abs().to_degrees());
    }
    SequenceMetrics::from_errors(errors)
}

/// Frame-pooled metrics over several sequences.
pub fn pooled_metrics(parts: &[SequenceMetrics]) -> Result<SequenceMetrics> {
    SequenceMetrics::from_errors(
        parts
            .iter()
            .flat_map(|m| m.frame_errors.iter().copied())
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub mean: f64,
    pub outliers: Vec<f64>,
}

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartiles, 1.5 IQR whiskers, outliers and mean.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(arg_err!("boxplot of an empty sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
    );
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|v| *v >= lo_fence && *v <= hi_fence)
        .collect();
    Ok(BoxplotStats {
        median,
        q1,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        outliers: sorted
            .into_iter()
            .filter(|v| *v < lo_fence || *v > hi_fence)
            .collect(),
    })
}

/// Median of an unsorted sample.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

//! Alignment schedule: decides how much weight moves from motion
//! supervision to object continuity, based on how well the detector's boxes
//! and counts agree with the motion prior.

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    /// Box mismatch tolerated before the schedule starts penalizing.
    pub bbms_slack: f64,
    /// Factor on the motion object count tolerated before penalizing.
    pub count_slack: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            bbms_slack: 0.1,
            count_slack: 1.25,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bbms_slack.is_finite() && self.bbms_slack >= 0.0) {
            return Err(MocError::Config("bbms_slack must be finite and >= 0".into()));
        }
        if !(self.count_slack.is_finite() && self.count_slack > 0.0) {
            return Err(MocError::Config("count_slack must be finite and > 0".into()));
        }
        Ok(())
    }
}

fn mean_sq(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.as_array()
        .iter()
        .zip(b.as_array())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 4.0
}

/// Bounding-box matching score: each predicted box contributes its mean
/// squared coordinate gap to the closest motion box. With no motion boxes
/// the full frame stands in as the only target.
pub fn bbms(pred: &[BoundingBox], motion: &[BoundingBox]) -> f64 {
    let sentinel = [BoundingBox::full_frame()];
    let targets = if motion.is_empty() { &sentinel[..] } else { motion };
    pred.iter()
        .map(|p| targets.iter().map(|m| mean_sq(p, m)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// `(bbms - slack)+ + (count - motion_count * count_slack)+`
pub fn delta_align(bbms: f64, count: f64, motion_count: f64, params: &ScheduleParams) -> f64 {
    (bbms - params.bbms_slack).max(0.0) + (count - motion_count * params.count_slack).max(0.0)
}

/// `2^-delta`
pub fn lambda_align(delta: f64) -> f64 {
    2f64.powf(-delta)
}

/// One entry of the per-epoch schedule trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub epoch: usize,
    pub bbms: f64,
    pub c: f64,
    pub c_hat: f64,
    pub delta_align: f64,
    pub lambda_align: f64,
}

/// Per-frame statistics gathered over an epoch's evaluation batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameAlignment {
    pub pred: Vec<BoundingBox>,
    pub motion: Vec<BoundingBox>,
}

/// Averages the box score over frames and sums object counts, then derives
/// the alignment weight for the next epoch.
pub fn epoch_schedule(epoch: usize, frames: &[FrameAlignment], params: &ScheduleParams) -> ScheduleRecord {
    let n = frames.len().max(1) as f64;
    let score = frames.iter().map(|f| bbms(&f.pred, &f.motion)).sum::<f64>() / n;
    let c = frames.iter().map(|f| f.pred.len()).sum::<usize>() as f64;
    let c_hat = frames.iter().map(|f| f.motion.len()).sum::<usize>() as f64;
    let delta = delta_align(score, c, c_hat, params);
    ScheduleRecord {
        epoch,
        bbms: score,
        c,
        c_hat,
        delta_align: delta,
        lambda_align: lambda_align(delta),
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};
use crate::geometry::{center_divergence, iou, BoundingBox, DetectedObject};
use crate::synthgen::GroundTruthObject;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    /// Hit when the center divergence is below the threshold.
    CenterDivergence,
    /// Hit when the IoU reaches the threshold.
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionMatchConfig {
    pub criterion: MatchCriterion,
    pub threshold: f64,
}

impl Default for DetectionMatchConfig {
    fn default() -> Self {
        Self {
            criterion: MatchCriterion::CenterDivergence,
            threshold: 0.5,
        }
    }
}

impl DetectionMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_finite() && self.threshold > 0.0 {
            Ok(())
        } else {
            Err(MocError::Config(format!("match threshold must be > 0, got {}", self.threshold)))
        }
    }

    /// Match quality where larger is better, or `None` if the pair fails
    /// the threshold.
    pub fn score(&self, pred: &BoundingBox, gt: &BoundingBox) -> Result<Option<f64>> {
        Ok(match self.criterion {
            MatchCriterion::CenterDivergence => {
                let d = center_divergence(pred, gt)?;
                (d < self.threshold).then_some(-d)
            }
            MatchCriterion::Iou => {
                let v = iou(pred, gt);
                (v >= self.threshold).then_some(v)
            }
        })
    }
}

/// A predicted box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

impl From<&DetectedObject> for ScoredBox {
    fn from(d: &DetectedObject) -> Self {
        Self {
            bbox: d.bbox,
            score: d.pres,
        }
    }
}

/// Hit, detection and ground-truth counts, summable across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrCounts {
    pub hits: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

impl std::ops::AddAssign for PrCounts {
    fn add_assign(&mut self, o: Self) {
        self.hits += o.hits;
        self.detections += o.detections;
        self.ground_truth += o.ground_truth;
    }
}

impl PrCounts {
    pub fn precision(&self) -> f64 {
        match self.detections {
            0 if self.ground_truth == 0 => 1.0,
            0 => 0.0,
            d => self.hits as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.ground_truth {
            0 => 1.0,
            g => self.hits as f64 / g as f64,
        }
    }

    pub fn f_score(&self) -> f64 {
        f_score(self.precision(), self.recall())
    }
}

/// Drops irrelevant ground truth and the detections whose only passing
/// matches are irrelevant objects. With `all_objects` every object counts.
pub fn relevant_subset<'a>(
    detections: &[ScoredBox],
    gt: &'a [GroundTruthObject],
    config: &DetectionMatchConfig,
    all_objects: bool,
) -> Result<(Vec<ScoredBox>, Vec<&'a GroundTruthObject>)> {
    if all_objects {
        return Ok((detections.to_vec(), gt.iter().collect()));
    }
    let mut kept = Vec::with_capacity(detections.len());
    for d in detections {
        let mut hits_relevant = false;
        let mut hits_irrelevant = false;
        for g in gt {
            if config.score(&d.bbox, &g.bbox)?.is_some() {
                if g.relevant {
                    hits_relevant = true;
                } else {
                    hits_irrelevant = true;
                }
            }
        }
        if hits_relevant || !hits_irrelevant {
            kept.push(*d);
        }
    }
    Ok((kept, gt.iter().filter(|g| g.relevant).collect()))
}

/// Kuhn's augmenting-path search from detection `d`.
fn augment(d: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
    for &g in &adj[d] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        if owner[g].map_or(true, |o| augment(o, adj, seen, owner)) {
            owner[g] = Some(d);
            return true;
        }
    }
    false
}

/// One-to-one matching of detections to ground truth that maximizes the
/// number of hits. Detections are tried in descending confidence, each
/// preferring its best-scoring candidate, so when matches do not compete
/// this coincides with greedy best-match assignment. Returns, per
/// ground-truth box, the index of its matched detection.
pub fn match_detections(
    detections: &[ScoredBox],
    gt: &[BoundingBox],
    config: &DetectionMatchConfig,
) -> Result<Vec<Option<usize>>> {
    let mut adj = Vec::with_capacity(detections.len());
    for d in detections {
        let mut cands = Vec::new();
        for (j, g) in gt.iter().enumerate() {
            if let Some(s) = config.score(&d.bbox, g)? {
                cands.push((s, j));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        adj.push(cands.into_iter().map(|(_, j)| j).collect::<Vec<_>>());
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut owner = vec![None; gt.len()];
    for d in order {
        let mut seen = vec![false; gt.len()];
        augment(d, &adj, &mut seen, &mut owner);
    }
    Ok(owner)
}

pub fn precision_recall_counts(
    detections: &[ScoredBox],
    gt: &[GroundTruthObject],
    config: &DetectionMatchConfig,
    all_objects: bool,
) -> Result<PrCounts> {
    let (dets, gts) = relevant_subset(detections, gt, config, all_objects)?;
    let boxes: Vec<BoundingBox> = gts.iter().map(|g| g.bbox).collect();
    let owner = match_detections(&dets, &boxes, config)?;
    Ok(PrCounts {
        hits: owner.iter().flatten().count(),
        detections: dets.len(),
        ground_truth: boxes.len(),
    })
}

/// Precision and recall for one frame.
pub fn precision_recall(
    detections: &[ScoredBox],
    gt: &[GroundTruthObject],
    config: &DetectionMatchConfig,
) -> Result<(f64, f64)> {
    let c = precision_recall_counts(detections, gt, config, false)?;
    Ok((c.precision(), c.recall()))
}

/// Harmonic mean; 0 when both are 0.
pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// IoU thresholds `0.1, 0.2, ..., 1.0`.
pub fn default_ap_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// 11-point interpolated average precision at one IoU threshold, pooling
/// detections over frames. Each frame is `(detections, ground-truth boxes)`.
pub fn average_precision_at(frames: &[(Vec<ScoredBox>, Vec<BoundingBox>)], threshold: f64) -> f64 {
    let total_gt: usize = frames.iter().map(|f| f.1.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (fi, (dets, _)) in frames.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            pool.push((d.score, fi, di));
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut claimed: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.1.len()]).collect();
    let mut curve = Vec::with_capacity(pool.len());
    let mut tp = 0usize;
    for (k, &(_, fi, di)) in pool.iter().enumerate() {
        let d = &frames[fi].0[di];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in frames[fi].1.iter().enumerate() {
            if claimed[fi][j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if v >= threshold && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        if let Some((_, j)) = best {
            claimed[fi][j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Mean of [`average_precision_at`] over `thresholds`.
pub fn average_precision(frames: &[(Vec<ScoredBox>, Vec<BoundingBox>)], thresholds: &[f64]) -> f64 {
    if thresholds.is_empty() {
        return 0.0;
    }
    thresholds.iter().map(|&t| average_precision_at(frames, t)).sum::<f64>() / thresholds.len() as f64
}

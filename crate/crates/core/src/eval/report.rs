use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cluster::{adjusted_mutual_information, kmeans, AmiNormalizer};
use super::detection::{
    average_precision, default_ap_thresholds, match_detections, relevant_subset, DetectionMatchConfig, PrCounts,
    ScoredBox,
};
use super::probe::{few_shot_accuracy, DEFAULT_RIDGE_ALPHA};
use crate::detector::{encode_frames, DetectorParams};
use crate::error::{MocError, Result};
use crate::geometry::{BoundingBox, Frame};
use crate::synthgen::{GroundTruthObject, LabeledSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub matching: DetectionMatchConfig,
    pub all_objects: bool,
    pub ami_normalizer: AmiNormalizer,
    pub ridge_alpha: f64,
    pub ap_thresholds: Vec<f64>,
    /// Seeds k-means and the few-shot splits.
    pub seed: u64,
    /// Steps between metric snapshots while training.
    pub trace_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            matching: DetectionMatchConfig::default(),
            all_objects: false,
            ami_normalizer: AmiNormalizer::Max,
            ridge_alpha: DEFAULT_RIDGE_ALPHA,
            ap_thresholds: default_ap_thresholds(),
            seed: 0,
            trace_every: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        if !(self.ridge_alpha > 0.0 && self.ridge_alpha.is_finite()) {
            return Err(MocError::Config("eval.ridge_alpha must be > 0".into()));
        }
        if self.ap_thresholds.is_empty() || self.ap_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(MocError::Config("eval.ap_thresholds must be non-empty values in (0, 1]".into()));
        }
        Ok(())
    }
}

/// An object encoding with the ground-truth class it overlaps best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSample {
    pub enc: Vec<f64>,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FewShot {
    pub n1: f64,
    pub n4: f64,
    pub n16: f64,
    pub n64: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub ami: f64,
    pub few_shot: FewShot,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "step,f_score,precision,recall,ap,ami,few_shot_n1,few_shot_n4,few_shot_n16,few_shot_n64";

    pub fn csv_row(&self, step: usize) -> String {
        let f = &self.few_shot;
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.f_score, self.precision, self.recall, self.ap, self.ami, f.n1, f.n4, f.n16, f.n64
        )
    }

    pub fn is_finite(&self) -> bool {
        let f = &self.few_shot;
        [self.f_score, self.precision, self.recall, self.ap, self.ami, f.n1, f.n4, f.n16, f.n64]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Labels each detection with the class of its best-scoring ground-truth
/// box, or no label when none passes the threshold.
pub fn assign_classes(
    detections: &[(ScoredBox, Vec<f64>)],
    gt: &[&GroundTruthObject],
    config: &DetectionMatchConfig,
) -> Result<Vec<EncodingSample>> {
    let mut out = Vec::with_capacity(detections.len());
    for (d, enc) in detections {
        let mut best: Option<(f64, usize)> = None;
        for g in gt {
            if let Some(s) = config.score(&d.bbox, &g.bbox)? {
                if best.map_or(true, |b| s > b.0) {
                    best = Some((s, g.class));
                }
            }
        }
        out.push(EncodingSample {
            enc: enc.clone(),
            class: best.map(|b| b.1),
        });
    }
    Ok(out)
}

/// k-means with one cluster per distinct label (no-label included), scored
/// against the labels. Empty input scores 0.
pub fn ami_of_encodings(samples: &[EncodingSample], norm: AmiNormalizer, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.class.unwrap_or(usize::MAX)).collect();
    let k = truth.iter().collect::<BTreeSet<_>>().len();
    let points: Vec<Vec<f64>> = samples.iter().map(|s| s.enc.clone()).collect();
    let pred = kmeans(&points, k, seed)?;
    adjusted_mutual_information(&truth, &pred, norm)
}

/// Detection, clustering and few-shot metrics of `params` on `split`, with
/// `background` as the model's fixed background.
pub fn evaluate(
    params: &DetectorParams,
    split: &[LabeledSequence],
    background: &Frame,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    let mut counts = PrCounts::default();
    let mut ap_frames: Vec<(Vec<ScoredBox>, Vec<BoundingBox>)> = Vec::new();
    let mut samples = Vec::new();
    for seq in split {
        let frames: Vec<_> = seq.sequence.frames().iter().collect();
        let grids = encode_frames(params, &frames, background)?;
        for (grid, gt) in grids.iter().zip(&seq.labels) {
            let dets = grid.detections();
            let scored: Vec<ScoredBox> = dets.iter().map(ScoredBox::from).collect();
            let (kept, gts) = relevant_subset(&scored, gt, &config.matching, config.all_objects)?;
            let boxes: Vec<BoundingBox> = gts.iter().map(|g| g.bbox).collect();
            let owner = match_detections(&kept, &boxes, &config.matching)?;
            counts += PrCounts {
                hits: owner.iter().flatten().count(),
                detections: kept.len(),
                ground_truth: boxes.len(),
            };
            let kept_with_enc: Vec<(ScoredBox, Vec<f64>)> = scored
                .iter()
                .zip(&dets)
                .filter(|(s, _)| kept.contains(s))
                .map(|(s, d)| (*s, d.enc.clone()))
                .collect();
            samples.extend(assign_classes(&kept_with_enc, &gts, &config.matching)?);
            ap_frames.push((kept, boxes));
        }
    }
    let ami = ami_of_encodings(&samples, config.ami_normalizer, config.seed)?;
    let labelled: Vec<(Vec<f64>, usize)> = samples.iter().filter_map(|s| s.class.map(|c| (s.enc.clone(), c))).collect();
    let shot = |n: usize| few_shot_accuracy(&labelled, n, config.seed, config.ridge_alpha);
    Ok(MetricsReport {
        f_score: counts.f_score(),
        precision: counts.precision(),
        recall: counts.recall(),
        ap: average_precision(&ap_frames, &config.ap_thresholds),
        ami,
        few_shot: FewShot {
            n1: shot(1)?,
            n4: shot(4)?,
            n16: shot(16)?,
            n64: shot(64)?,
        },
    })
}

/// CSV text for a series of `(step, report)` snapshots.
pub fn metrics_csv(rows: &[(usize, MetricsReport)]) -> String {
    let mut s = String::from(MetricsReport::CSV_HEADER);
    s.push('\n');
    for (step, r) in rows {
        let _ = writeln!(s, "{}", r.csv_row(*step));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ModelConfig;
    use crate::synthgen::{generate_dataset, render_background, GeneratorConfig};

    fn one_hot(c: usize, k: usize) -> Vec<f64> {
        (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn one_hot_encodings_score_one() {
        let samples: Vec<EncodingSample> = (0..30)
            .map(|i| EncodingSample {
                enc: one_hot(i % 3, 3),
                class: Some(i % 3),
            })
            .collect();
        assert!((ami_of_encodings(&samples, AmiNormalizer::Max, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_encodings_carry_no_information() {
        let samples: Vec<EncodingSample> = (0..30)
            .map(|i| EncodingSample {
                enc: vec![0.5; 4],
                class: if i % 4 == 3 { None } else { Some(i % 4) },
            })
            .collect();
        assert!(ami_of_encodings(&samples, AmiNormalizer::Max, 0).unwrap() <= 1e-9);
        assert_eq!(ami_of_encodings(&[], AmiNormalizer::Max, 0).unwrap(), 0.0);
    }

    #[test]
    fn class_assignment_takes_best_match() {
        let gt = [
            GroundTruthObject {
                bbox: BoundingBox::new(0.0, 0.0, 0.2, 0.2),
                class: 4,
                relevant: true,
            },
            GroundTruthObject {
                bbox: BoundingBox::new(0.05, 0.05, 0.25, 0.25),
                class: 7,
                relevant: true,
            },
        ];
        let refs: Vec<&GroundTruthObject> = gt.iter().collect();
        let det = ScoredBox {
            bbox: BoundingBox::new(0.06, 0.06, 0.26, 0.26),
            score: 0.9,
        };
        let far = ScoredBox {
            bbox: BoundingBox::new(0.7, 0.7, 0.9, 0.9),
            score: 0.9,
        };
        let s = assign_classes(&[(det, vec![1.0]), (far, vec![2.0])], &refs, &DetectionMatchConfig::default()).unwrap();
        assert_eq!(s[0].class, Some(7));
        assert_eq!(s[1].class, None);
    }

    #[test]
    fn zero_weights_detect_nothing() {
        let gen = GeneratorConfig {
            height: 32,
            width: 32,
            train_sequences: 1,
            test_sequences: 2,
            ..GeneratorConfig::default()
        };
        let data = generate_dataset(&gen, 3).unwrap();
        let model = ModelConfig {
            frame_height: 32,
            frame_width: 32,
            grid_h: 4,
            grid_w: 4,
            patch: 16,
            pool: 2,
            hidden: 8,
            enc_dim: 4,
        };
        let params = DetectorParams::zeros(model).unwrap();
        let r = evaluate(&params, &data.test, &render_background(&gen), &EvalConfig::default()).unwrap();
        assert_eq!(r.f_score, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.few_shot, FewShot::default());
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn random_model_metrics_in_range() {
        let gen = GeneratorConfig {
            height: 32,
            width: 32,
            train_sequences: 1,
            test_sequences: 3,
            ..GeneratorConfig::default()
        };
        let data = generate_dataset(&gen, 5).unwrap();
        let model = ModelConfig {
            frame_height: 32,
            frame_width: 32,
            grid_h: 4,
            grid_w: 4,
            patch: 16,
            pool: 2,
            hidden: 8,
            enc_dim: 4,
        };
        let params = DetectorParams::init(model, 9).unwrap();
        let r = evaluate(&params, &data.test, &render_background(&gen), &EvalConfig::default()).unwrap();
        assert!(r.is_finite());
        for v in [r.f_score, r.precision, r.recall, r.ap, r.few_shot.n1, r.few_shot.n64] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((-1.0..=1.0).contains(&r.ami));
        assert_eq!(evaluate(&params, &data.test, &render_background(&gen), &EvalConfig::default()).unwrap(), r);
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_csv(&[(200, MetricsReport::default())]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("200,"));
    }
}

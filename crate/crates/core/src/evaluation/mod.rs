//! VOC-style average precision, per-class reports, and the cross-validation
//! harnesses that compare base detectors against the fusion methods.

mod cv;
mod table;

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, Detection, GroundTruthBox};
use crate::error::{Error, Result};
use crate::geometry::iou;

pub use cv::{
    cv_image, cv_video, evaluate_split, image_folds, video_segments, CvImageConfig, CvReport,
    CvVideoConfig, FoldReport, MethodMean, MethodReport, PipelineConfig, Segment, METHOD_ENSEMBLE,
    METHOD_NMS, METHOD_REFINED,
};
pub use table::render_table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detections scored below this are ignored.
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 0.75, 0.85],
            score_floor: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("at least one IoU threshold is required".into()));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!(
                "score_floor {} outside [0, 1)",
                self.score_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub ap: f64,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    /// Classes with at least one ground-truth box, ascending by id.
    pub classes: Vec<ClassAp>,
    /// Mean of the per-class APs.
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdReport>,
    /// Detections at or above the score floor.
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    pub fn map_at(&self, iou_threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou_threshold - iou_threshold).abs() < 1e-12)
            .map(|t| t.map)
    }

    pub fn ap_at(&self, iou_threshold: f64, class_id: u32) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou_threshold - iou_threshold).abs() < 1e-12)?
            .classes
            .iter()
            .find(|c| c.class_id == class_id)
            .map(|c| c.ap)
    }
}

/// Marks each ranked detection as a true positive or not.
///
/// Detections below `score_floor` are dropped; the rest are ranked by
/// descending score (ties by image id, then input order). Each detection
/// claims the unmatched ground-truth box of its image with the highest IoU
/// at or above `iou_threshold`.
pub fn rank_and_match(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_threshold: f64,
    score_floor: f64,
) -> Vec<bool> {
    let mut ranked: Vec<&Detection> = detections.iter().filter(|d| d.score >= score_floor).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));

    let mut gt_by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        gt_by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut claimed = vec![false; ground_truth.len()];

    ranked
        .iter()
        .map(|det| {
            let mut best: Option<(f64, usize)> = None;
            for &gi in gt_by_image.get(det.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if claimed[gi] {
                    continue;
                }
                let overlap = iou(&det.bbox, &ground_truth[gi].bbox);
                if overlap >= iou_threshold && best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, gi));
                }
            }
            match best {
                Some((_, gi)) => {
                    claimed[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the monotone precision envelope, sampled at every recall
/// change (all-points interpolation).
pub fn ap_from_matches(is_tp: &[bool], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return 0.0;
    }
    let npos = num_ground_truth as f64;
    let mut recall = Vec::with_capacity(is_tp.len() + 2);
    let mut precision = Vec::with_capacity(is_tp.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);

    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Average precision of one class's detections against its ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_threshold: f64,
    score_floor: f64,
) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let matches = rank_and_match(detections, ground_truth, iou_threshold, score_floor);
    ap_from_matches(&matches, ground_truth.len())
}

/// Per-class AP and MAP at every configured threshold. Classes without
/// ground truth are left out of the mean.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    class_names: &[String],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let classes: BTreeSet<u32> = ground_truth.iter().map(|g| g.class_id).collect();
    let mut det_by_class: HashMap<u32, Vec<Detection>> = HashMap::new();
    for d in detections {
        if classes.contains(&d.class_id) {
            det_by_class.entry(d.class_id).or_default().push(d.clone());
        }
    }
    let mut gt_by_class: HashMap<u32, Vec<GroundTruthBox>> = HashMap::new();
    for g in ground_truth {
        gt_by_class.entry(g.class_id).or_default().push(g.clone());
    }

    let empty: Vec<Detection> = Vec::new();
    let thresholds = config
        .iou_thresholds
        .par_iter()
        .map(|&t| {
            let per_class: Vec<ClassAp> = classes
                .iter()
                .map(|c| {
                    let dets = det_by_class.get(c).unwrap_or(&empty);
                    let gts = &gt_by_class[c];
                    ClassAp {
                        class_id: *c,
                        class_name: class_names.get(*c as usize).cloned(),
                        ap: average_precision(dets, gts, t, config.score_floor),
                        num_ground_truth: gts.len(),
                        num_detections: dets.iter().filter(|d| d.score >= config.score_floor).count(),
                    }
                })
                .collect();
            let map = if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
            };
            ThresholdReport {
                iou_threshold: t,
                classes: per_class,
                map,
            }
        })
        .collect();

    Ok(EvalReport {
        thresholds,
        num_detections: detections.iter().filter(|d| d.score >= config.score_floor).count(),
        num_ground_truth: ground_truth.len(),
    })
}

/// Evaluates a bundle's own detections against its own ground truth.
pub fn evaluate_bundle(bundle: &DatasetBundle, config: &EvalConfig) -> Result<EvalReport> {
    evaluate(&bundle.detections, &bundle.ground_truth, &bundle.class_names, config)
}

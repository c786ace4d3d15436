//! Cluster-based ensembling: group each detector's boxes around confident
//! seeds, drop clusters backed by a single detector, and fuse the rest with
//! per-detector weights.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{by_confidence, DatasetBundle, Detection};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::json;

/// Below this magnitude a normalization denominator is treated as zero.
pub const DENOMINATOR_EPS: f64 = 1e-9;

/// Name appended to the detector table for fused output.
pub const ENSEMBLE_NAME: &str = "ensemble";

/// How fused coordinates are formed from score-scaled member coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateRule {
    /// `sum(w s c) / sum(w s)`: a weighted average, invariant to rescaling `w`.
    #[default]
    Normalized,
    /// `sum(w s c)`: the raw regression output.
    Linear,
}

/// One scalar weight per detector, indexed by detector id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn uniform(detectors: usize, value: f64) -> Self {
        WeightVector(vec![value; detectors])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.0.iter().find(|w| !w.is_finite()) {
            return Err(Error::validation("weights", format!("non-finite weight {w}")));
        }
        Ok(())
    }
}

/// On-disk form of a learned weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub detector_names: Vec<String>,
    pub weights: WeightVector,
    pub coordinate_rule: CoordinateRule,
}

impl WeightsFile {
    /// Errors unless the weights were learned for exactly these detectors.
    pub fn check_detectors(&self, detector_names: &[String]) -> Result<()> {
        if self.detector_names != detector_names {
            return Err(Error::validation(
                "weights file",
                format!(
                    "detector_names {:?} do not match bundle detectors {:?}",
                    self.detector_names, detector_names
                ),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_precise_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: WeightsFile = json::read_json(path)?;
        if file.weights.len() != file.detector_names.len() {
            return Err(Error::validation(
                "weights file",
                format!(
                    "{} weights for {} detectors",
                    file.weights.len(),
                    file.detector_names.len()
                ),
            ));
        }
        file.weights.validate()?;
        Ok(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    /// Clusters with fewer distinct source detectors are discarded.
    pub min_sources: usize,
    pub coordinate_rule: CoordinateRule,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iou_threshold: 0.5,
            min_sources: 2,
            coordinate_rule: CoordinateRule::Normalized,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, detectors: usize) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "fusion iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.min_sources == 0 || self.min_sources > detectors.max(1) {
            return Err(Error::Config(format!(
                "min_sources must lie in [1, {detectors}], got {}",
                self.min_sources
            )));
        }
        Ok(())
    }
}

/// Boxes from distinct detectors hypothesized to cover the same object.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub image_id: String,
    pub class_id: u32,
    /// At most one detection per detector.
    pub members: BTreeMap<usize, Detection>,
    pub seed_detector_id: usize,
}

impl Cluster {
    pub fn seed(&self) -> &Detection {
        &self.members[&self.seed_detector_id]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Greedy clustering of one image's detections.
///
/// Per class, the most confident unassigned box seeds a cluster, and every
/// other detector contributes its unassigned box with the highest IoU above
/// `iou_threshold` against the seed. Every input lands in exactly one cluster.
pub fn build_clusters(detections: &[Detection], iou_threshold: f64) -> Vec<Cluster> {
    let mut per_class: BTreeMap<u32, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        per_class.entry(d.class_id).or_default().push(d);
    }

    let mut clusters = Vec::new();
    for (class_id, mut boxes) in per_class {
        boxes.sort_by(|a, b| by_confidence(a, b));
        let mut assigned = vec![false; boxes.len()];
        for seed_idx in 0..boxes.len() {
            if assigned[seed_idx] {
                continue;
            }
            assigned[seed_idx] = true;
            let seed = boxes[seed_idx];

            // best candidate per detector: (iou, index)
            let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for (j, cand) in boxes.iter().enumerate().skip(seed_idx + 1) {
                if assigned[j] || cand.detector_id == seed.detector_id {
                    continue;
                }
                let overlap = iou(&seed.bbox, &cand.bbox);
                if overlap <= iou_threshold {
                    continue;
                }
                let slot = best.entry(cand.detector_id).or_insert((overlap, j));
                if overlap > slot.0 {
                    *slot = (overlap, j);
                }
            }

            let mut members = BTreeMap::new();
            members.insert(seed.detector_id, seed.clone());
            for (detector, (_, j)) in best {
                assigned[j] = true;
                members.insert(detector, boxes[j].clone());
            }
            clusters.push(Cluster {
                image_id: seed.image_id.clone(),
                class_id,
                members,
                seed_detector_id: seed.detector_id,
            });
        }
    }
    clusters
}

/// Combines score-scaled coordinate rows (`rows[j] = s_j * box_j`) with the
/// weights. Rows of absent detectors are zero with score zero.
pub fn combine_rows(
    rows: &[[f64; 4]],
    scores: &[f64],
    weights: &[f64],
    rule: CoordinateRule,
) -> Result<[f64; 4]> {
    let mut num = [0.0; 4];
    for (row, w) in rows.iter().zip(weights) {
        for d in 0..4 {
            num[d] += w * row[d];
        }
    }
    match rule {
        CoordinateRule::Linear => Ok(num),
        CoordinateRule::Normalized => {
            let denom: f64 = scores.iter().zip(weights).map(|(s, w)| s * w).sum();
            if denom.abs() <= DENOMINATOR_EPS || !denom.is_finite() {
                return Err(Error::Numerical(format!(
                    "weighted score sum {denom:e} is too close to zero to normalize"
                )));
            }
            Ok(num.map(|n| n / denom))
        }
    }
}

/// Fuses a cluster into a single detection carrying the reserved ensemble
/// detector id (`weights.len()`).
pub fn fuse_cluster(
    cluster: &Cluster,
    weights: &WeightVector,
    rule: CoordinateRule,
) -> Result<Detection> {
    let d = weights.len();
    let name = || {
        format!(
            "cluster (image \"{}\", class {}, seed detector {})",
            cluster.image_id, cluster.class_id, cluster.seed_detector_id
        )
    };
    if cluster.is_empty() {
        return Err(Error::validation(name(), "empty cluster"));
    }

    let mut rows = vec![[0.0; 4]; d];
    let mut scores = vec![0.0; d];
    for (&j, member) in &cluster.members {
        if j >= d {
            return Err(Error::validation(
                name(),
                format!("detector {j} has no weight ({d} weights)"),
            ));
        }
        scores[j] = member.score;
        rows[j] = member.bbox.as_array().map(|c| c * member.score);
    }

    let coords = combine_rows(&rows, &scores, weights.as_slice(), rule)
        .map_err(|e| Error::Numerical(format!("{}: {e}", name())))?;

    let weight_sum: f64 = weights.as_slice().iter().sum();
    if weight_sum.abs() <= DENOMINATOR_EPS {
        return Err(Error::Numerical(format!("{}: weights sum to zero", name())));
    }
    let score: f64 = weights
        .as_slice()
        .iter()
        .zip(&scores)
        .map(|(w, s)| w * s)
        .sum::<f64>()
        / weight_sum;
    if !score.is_finite() || !coords.iter().all(|c| c.is_finite()) {
        return Err(Error::Numerical(format!("{}: non-finite fused value", name())));
    }

    // Negative weights can invert corners; keep the box well-formed.
    let bbox = BoundingBox {
        x1: coords[0].min(coords[2]),
        y1: coords[1].min(coords[3]),
        x2: coords[0].max(coords[2]),
        y2: coords[1].max(coords[3]),
    };

    Ok(Detection {
        image_id: cluster.image_id.clone(),
        detector_id: d,
        class_id: cluster.class_id,
        score: score.clamp(0.0, 1.0),
        bbox,
        recovered: false,
    })
}

/// Clusters, filters by source count and fuses the detections of one image.
/// Output is sorted by descending fused score.
pub fn ensemble_fuse(
    detections: &[Detection],
    weights: &WeightVector,
    config: &FusionConfig,
) -> Result<Vec<Detection>> {
    let mut fused = build_clusters(detections, config.iou_threshold)
        .iter()
        .filter(|c| c.len() >= config.min_sources)
        .map(|c| fuse_cluster(c, weights, config.coordinate_rule))
        .collect::<Result<Vec<_>>>()?;
    fused.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(fused)
}

/// Fuses every image. The output bundle's detector table gains a trailing
/// `ensemble` entry, whose id the fused detections carry.
pub fn ensemble_fuse_bundle(
    bundle: &DatasetBundle,
    weights: &WeightVector,
    config: &FusionConfig,
) -> Result<DatasetBundle> {
    let d = bundle.num_detectors();
    if weights.len() != d {
        return Err(Error::validation(
            "weights",
            format!("{} weights for {d} detectors", weights.len()),
        ));
    }
    weights.validate()?;
    config.validate(d)?;

    let per_image = bundle
        .detections_by_image()
        .par_iter()
        .map(|(_, dets)| ensemble_fuse(dets, weights, config))
        .collect::<Result<Vec<_>>>()?;

    let mut detector_names = bundle.detector_names.clone();
    detector_names.push(ENSEMBLE_NAME.to_string());
    Ok(DatasetBundle {
        detector_names,
        detections: per_image.concat(),
        ..bundle.clone()
    })
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use super::{evaluate, ClassAp, EvalConfig, EvalReport, ThresholdReport};
use crate::dataset::DatasetBundle;
use crate::ensemble::{ensemble_fuse_bundle, FusionConfig};
use crate::error::{Error, Result};
use crate::nms::{nms_fuse_bundle, NmsConfig};
use crate::refine::{refine_bundle, RefineConfig};
use crate::training::{build_pairs, train_weights, TrainConfig, TrainReport};

pub const METHOD_NMS: &str = "NMS";
pub const METHOD_ENSEMBLE: &str = "Ensemble";
pub const METHOD_REFINED: &str = "Ensemble+refine";

/// Settings for every stage of the fuse/train/refine/evaluate pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub nms: NmsConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self, detectors: usize) -> Result<()> {
        self.nms.validate()?;
        self.fusion.validate(detectors)?;
        self.train.validate()?;
        self.refine.validate()?;
        self.eval.validate()?;
        if self.fusion.coordinate_rule != self.train.prediction_rule {
            return Err(Error::Config(format!(
                "fusion coordinate_rule {:?} differs from training prediction_rule {:?}",
                self.fusion.coordinate_rule, self.train.prediction_rule
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvImageConfig {
    pub folds: usize,
    /// Annotated images used to learn weights in each fold.
    pub train_size: usize,
    pub seed: u64,
}

impl Default for CvImageConfig {
    fn default() -> Self {
        CvImageConfig {
            folds: 5,
            train_size: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvVideoConfig {
    pub segments: usize,
    /// Trailing frames of each segment used for weight learning.
    pub train_tail: usize,
}

impl Default for CvVideoConfig {
    fn default() -> Self {
        CvVideoConfig {
            segments: 5,
            train_tail: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_images: Vec<String>,
    pub test_images: usize,
    pub train_pairs: usize,
    pub training: TrainReport,
    pub methods: Vec<MethodReport>,
}

impl FoldReport {
    pub fn method(&self, name: &str) -> Option<&EvalReport> {
        self.methods.iter().find(|m| m.method == name).map(|m| &m.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMean {
    pub method: String,
    pub iou_thresholds: Vec<f64>,
    /// Mean MAP over folds, one entry per threshold.
    pub map: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean: Vec<MethodMean>,
}

impl CvReport {
    pub fn mean_map(&self, method: &str, iou_threshold: f64) -> Option<f64> {
        let m = self.mean.iter().find(|m| m.method == method)?;
        let i = m
            .iou_thresholds
            .iter()
            .position(|t| (t - iou_threshold).abs() < 1e-12)?;
        Some(m.map[i])
    }

    /// Per-method reports averaged over folds, for tabulation. A class's AP
    /// is averaged over the folds whose test split contains it; MAP is the
    /// fold mean.
    pub fn mean_reports(&self) -> Vec<(String, EvalReport)> {
        self.mean
            .iter()
            .map(|mean| {
                let reports: Vec<&EvalReport> =
                    self.folds.iter().filter_map(|f| f.method(&mean.method)).collect();
                let thresholds = mean
                    .iou_thresholds
                    .iter()
                    .zip(&mean.map)
                    .enumerate()
                    .map(|(ti, (&t, &map))| {
                        let mut by_class: BTreeMap<u32, Vec<&ClassAp>> = BTreeMap::new();
                        for r in &reports {
                            if let Some(tr) = r.thresholds.get(ti) {
                                for c in &tr.classes {
                                    by_class.entry(c.class_id).or_default().push(c);
                                }
                            }
                        }
                        let classes = by_class
                            .into_values()
                            .map(|cs| ClassAp {
                                class_id: cs[0].class_id,
                                class_name: cs[0].class_name.clone(),
                                ap: cs.iter().map(|c| c.ap).sum::<f64>() / cs.len() as f64,
                                num_ground_truth: cs.iter().map(|c| c.num_ground_truth).sum(),
                                num_detections: cs.iter().map(|c| c.num_detections).sum(),
                            })
                            .collect();
                        ThresholdReport { iou_threshold: t, classes, map }
                    })
                    .collect();
                let report = EvalReport {
                    thresholds,
                    num_detections: reports.iter().map(|r| r.num_detections).sum(),
                    num_ground_truth: reports.iter().map(|r| r.num_ground_truth).sum(),
                };
                (mean.method.clone(), report)
            })
            .collect()
    }

    fn from_folds(folds: Vec<FoldReport>, thresholds: &[f64]) -> Self {
        let names: Vec<String> = folds
            .first()
            .map(|f| f.methods.iter().map(|m| m.method.clone()).collect())
            .unwrap_or_default();
        let mean = names
            .into_iter()
            .map(|method| {
                let map = thresholds
                    .iter()
                    .map(|&t| {
                        let sum: f64 = folds
                            .iter()
                            .map(|f| f.method(&method).and_then(|r| r.map_at(t)).unwrap_or(0.0))
                            .sum();
                        sum / folds.len() as f64
                    })
                    .collect();
                MethodMean {
                    method,
                    iou_thresholds: thresholds.to_vec(),
                    map,
                }
            })
            .collect();
        CvReport { folds, mean }
    }
}

fn eval_on(bundle: &DatasetBundle, gt: &DatasetBundle, config: &EvalConfig) -> Result<EvalReport> {
    evaluate(&bundle.detections, &gt.ground_truth, &gt.class_names, config)
}

/// Learns weights on `train_ids`, then scores each base detector, NMS fusion
/// and ensemble fusion on the same `test_ids`. With `refine` set, the fused
/// test detections are also run through both refinement stages.
pub fn evaluate_split(
    bundle: &DatasetBundle,
    train_ids: &[String],
    test_ids: &[String],
    pipeline: &PipelineConfig,
    refine: bool,
) -> Result<FoldReport> {
    pipeline.validate(bundle.num_detectors())?;
    let pairs = build_pairs(bundle, train_ids, pipeline.fusion.iou_threshold)?;
    let (weights, training) = train_weights(&pairs, &pipeline.train)?;

    let test = bundle.subset(test_ids);
    let mut methods = Vec::new();
    for (j, name) in bundle.detector_names.iter().enumerate() {
        let single = DatasetBundle {
            detections: test.detections.iter().filter(|d| d.detector_id == j).cloned().collect(),
            ..test.clone()
        };
        methods.push(MethodReport {
            method: name.clone(),
            report: eval_on(&single, &test, &pipeline.eval)?,
        });
    }
    let nms = nms_fuse_bundle(&test, &pipeline.nms)?;
    methods.push(MethodReport {
        method: METHOD_NMS.into(),
        report: eval_on(&nms, &test, &pipeline.eval)?,
    });
    let fused = ensemble_fuse_bundle(&test, &weights, &pipeline.fusion)?;
    methods.push(MethodReport {
        method: METHOD_ENSEMBLE.into(),
        report: eval_on(&fused, &test, &pipeline.eval)?,
    });
    if refine {
        let refined = refine_bundle(&fused, &pipeline.refine)?;
        methods.push(MethodReport {
            method: METHOD_REFINED.into(),
            report: eval_on(&refined, &test, &pipeline.eval)?,
        });
    }

    Ok(FoldReport {
        fold: 0,
        train_images: train_ids.to_vec(),
        test_images: test.images.len(),
        train_pairs: pairs.len(),
        training,
        methods,
    })
}

/// Seeded fold assignment: returns (train ids, test ids) per fold. Each
/// fold's training images are the first `train_size` of its shuffled chunk;
/// every other image is test data for that fold.
pub fn image_folds(bundle: &DatasetBundle, config: &CvImageConfig) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let n = bundle.images.len();
    if config.folds == 0 || config.train_size == 0 {
        return Err(Error::Config("folds and train_size must be positive".into()));
    }
    if n < config.folds * config.train_size {
        return Err(Error::Config(format!(
            "too few images: {n} < {} folds x {} training images",
            config.folds, config.train_size
        )));
    }
    let mut ids: Vec<String> = bundle.images.iter().map(|im| im.image_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let chunk = n / config.folds;
    Ok((0..config.folds)
        .map(|k| {
            let start = k * chunk;
            let train: Vec<String> = ids[start..start + config.train_size].to_vec();
            let test: Vec<String> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| *i < start || *i >= start + config.train_size)
                .map(|(_, id)| id.clone())
                .collect();
            (train, test)
        })
        .collect())
}

/// Image-dataset cross-validation over seeded folds.
pub fn cv_image(bundle: &DatasetBundle, config: &CvImageConfig, pipeline: &PipelineConfig) -> Result<CvReport> {
    pipeline.validate(bundle.num_detectors())?;
    let folds = image_folds(bundle, config)?;
    let reports = folds
        .par_iter()
        .enumerate()
        .map(|(k, (train, test))| {
            evaluate_split(bundle, train, test, pipeline, false).map(|r| FoldReport { fold: k, ..r })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(reports, &pipeline.eval.iou_thresholds))
}

/// One contiguous piece of a video: `test` frames come first, `train` frames
/// are the trailing part. Positions index the frame-ordered image list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub test: std::ops::Range<usize>,
    pub train: std::ops::Range<usize>,
}

/// Cuts `frames` into equal contiguous segments (remainder to the last).
pub fn video_segments(frames: usize, config: &CvVideoConfig) -> Result<Vec<Segment>> {
    if config.segments == 0 || config.train_tail == 0 {
        return Err(Error::Config("segments and train_tail must be positive".into()));
    }
    if frames < config.segments * (config.train_tail + 1) {
        return Err(Error::Config(format!(
            "video too short: {frames} frames < {} segments x ({} training + 1) frames",
            config.segments, config.train_tail
        )));
    }
    let len = frames / config.segments;
    Ok((0..config.segments)
        .map(|k| {
            let start = k * len;
            let end = if k + 1 == config.segments { frames } else { start + len };
            Segment {
                test: start..end - config.train_tail,
                train: end - config.train_tail..end,
            }
        })
        .collect())
}

/// Video cross-validation: per segment, learn weights on the trailing frames
/// and evaluate (with refinement) on the uninterrupted head.
pub fn cv_video(bundle: &DatasetBundle, config: &CvVideoConfig, pipeline: &PipelineConfig) -> Result<CvReport> {
    pipeline.validate(bundle.num_detectors())?;
    let frames: Vec<String> = bundle
        .frames_in_order()?
        .into_iter()
        .map(|im| im.image_id.clone())
        .collect();
    let segments = video_segments(frames.len(), config)?;
    let reports = segments
        .par_iter()
        .enumerate()
        .map(|(k, seg)| {
            let train = &frames[seg.train.clone()];
            let test = &frames[seg.test.clone()];
            evaluate_split(bundle, train, test, pipeline, true).map(|r| FoldReport { fold: k, ..r })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(reports, &pipeline.eval.iou_thresholds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageRecord;

    fn images(n: usize) -> DatasetBundle {
        DatasetBundle {
            images: (0..n).map(|i| ImageRecord::new(format!("im{i}"), 10, 10)).collect(),
            ..DatasetBundle::default()
        }
    }

    #[test]
    fn folds_have_expected_sizes_and_are_disjoint() {
        let b = images(600);
        let folds = image_folds(&b, &CvImageConfig::default()).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all_train = std::collections::HashSet::new();
        for (train, test) in &folds {
            assert_eq!(train.len(), 100);
            assert_eq!(test.len(), 500);
            for t in train {
                assert!(!test.contains(t));
                assert!(all_train.insert(t.clone()));
            }
        }
        assert_eq!(folds, image_folds(&b, &CvImageConfig::default()).unwrap());
        let other = image_folds(&b, &CvImageConfig { seed: 9, ..Default::default() }).unwrap();
        assert_ne!(folds, other);
    }

    #[test]
    fn too_few_images() {
        let err = image_folds(&images(499), &CvImageConfig::default()).unwrap_err();
        assert!(err.to_string().contains("too few images"));
    }

    #[test]
    fn segments_split_contiguously() {
        let segs = video_segments(1000, &CvVideoConfig::default()).unwrap();
        assert_eq!(segs.len(), 5);
        for (k, s) in segs.iter().enumerate() {
            assert_eq!(s.test, k * 200..k * 200 + 100);
            assert_eq!(s.train, k * 200 + 100..(k + 1) * 200);
        }
        let segs = video_segments(1003, &CvVideoConfig::default()).unwrap();
        assert_eq!(segs[4].test, 800..903);
        assert_eq!(segs[4].train, 903..1003);
        assert!(video_segments(504, &CvVideoConfig::default()).is_err());
        assert!(video_segments(505, &CvVideoConfig::default()).is_ok());
    }
}

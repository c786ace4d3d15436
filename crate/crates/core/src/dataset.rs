//! Detections, ground truth and image metadata, and the bundle file that
//! carries them together.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::json;

fn is_false(b: &bool) -> bool {
    !*b
}

/// One box emitted by a detector (or by a fusion stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: String,
    pub detector_id: usize,
    pub class_id: u32,
    pub score: f64,
    #[serde(rename = "bbox")]
    pub bbox: BoundingBox,
    /// Set on boxes inserted by tracking-based gap filling.
    #[serde(default, skip_serializing_if = "is_false")]
    pub recovered: bool,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        detector_id: usize,
        class_id: u32,
        score: f64,
        bbox: BoundingBox,
    ) -> Self {
        Detection {
            image_id: image_id.into(),
            detector_id,
            class_id,
            score,
            bbox,
            recovered: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BoundingBox,
}

impl GroundTruthBox {
    pub fn new(image_id: impl Into<String>, class_id: u32, bbox: BoundingBox) -> Self {
        GroundTruthBox {
            image_id: image_id.into(),
            class_id,
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Present (and consecutive) for video frames.
    pub frame_index: Option<u32>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            width,
            height,
            frame_index: None,
        }
    }

    pub fn frame(image_id: impl Into<String>, width: u32, height: u32, index: u32) -> Self {
        ImageRecord {
            frame_index: Some(index),
            ..ImageRecord::new(image_id, width, height)
        }
    }
}

/// Everything needed to fuse and evaluate one dataset: detector outputs
/// co-registered by image id, plus ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBundle {
    pub detector_names: Vec<String>,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

impl DatasetBundle {
    pub fn num_detectors(&self) -> usize {
        self.detector_names.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.image_id == image_id)
    }

    pub fn image_map(&self) -> HashMap<&str, &ImageRecord> {
        self.images.iter().map(|im| (im.image_id.as_str(), im)).collect()
    }

    /// Detections grouped by image, in the bundle's image order; images
    /// without detections get an empty group.
    pub fn detections_by_image(&self) -> Vec<(String, Vec<Detection>)> {
        let mut groups = group_by_image(&self.detections);
        self.images
            .iter()
            .map(|im| {
                let dets = groups.remove(&im.image_id).unwrap_or_default();
                (im.image_id.clone(), dets)
            })
            .collect()
    }

    pub fn ground_truth_by_image(&self) -> HashMap<&str, Vec<&GroundTruthBox>> {
        let mut map: HashMap<&str, Vec<&GroundTruthBox>> = HashMap::new();
        for g in &self.ground_truth {
            map.entry(g.image_id.as_str()).or_default().push(g);
        }
        map
    }

    /// Video frames ordered by frame index. Fails if any image lacks one.
    pub fn frames_in_order(&self) -> Result<Vec<&ImageRecord>> {
        let mut frames = Vec::with_capacity(self.images.len());
        for im in &self.images {
            if im.frame_index.is_none() {
                return Err(Error::validation(
                    format!("image \"{}\"", im.image_id),
                    "video operation requires frame_index on every image",
                ));
            }
            frames.push(im);
        }
        frames.sort_by_key(|im| im.frame_index);
        Ok(frames)
    }

    /// Restricts the bundle to a subset of images (detections and ground truth follow).
    pub fn subset(&self, image_ids: &[String]) -> DatasetBundle {
        let keep: HashSet<&str> = image_ids.iter().map(String::as_str).collect();
        DatasetBundle {
            detector_names: self.detector_names.clone(),
            class_names: self.class_names.clone(),
            images: self
                .images
                .iter()
                .filter(|im| keep.contains(im.image_id.as_str()))
                .cloned()
                .collect(),
            detections: self
                .detections
                .iter()
                .filter(|d| keep.contains(d.image_id.as_str()))
                .cloned()
                .collect(),
            ground_truth: self
                .ground_truth
                .iter()
                .filter(|g| keep.contains(g.image_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for (i, im) in self.images.iter().enumerate() {
            let record = || format!("images[{i}] (\"{}\")", im.image_id);
            if !ids.insert(im.image_id.as_str()) {
                return Err(Error::validation(record(), "duplicate image_id"));
            }
            if im.width == 0 || im.height == 0 {
                return Err(Error::validation(record(), "width and height must be positive"));
            }
        }
        self.validate_frames()?;

        let d = self.detector_names.len();
        let c = self.class_names.len();
        for (i, det) in self.detections.iter().enumerate() {
            let record = || format!("detections[{i}] (image \"{}\")", det.image_id);
            if !ids.contains(det.image_id.as_str()) {
                return Err(Error::validation(record(), "unknown image_id"));
            }
            if det.detector_id >= d {
                return Err(Error::validation(
                    record(),
                    format!("detector_id {} out of range (have {d} detectors)", det.detector_id),
                ));
            }
            if det.class_id as usize >= c {
                return Err(Error::validation(
                    record(),
                    format!("class_id {} out of range (have {c} classes)", det.class_id),
                ));
            }
            if !(0.0..=1.0).contains(&det.score) {
                return Err(Error::validation(
                    record(),
                    format!("score {} outside [0, 1]", det.score),
                ));
            }
            det.bbox
                .validate()
                .map_err(|e| Error::validation(record(), e.to_string()))?;
        }

        for (i, gt) in self.ground_truth.iter().enumerate() {
            let record = || format!("ground_truth[{i}] (image \"{}\")", gt.image_id);
            if !ids.contains(gt.image_id.as_str()) {
                return Err(Error::validation(record(), "unknown image_id"));
            }
            if gt.class_id as usize >= c {
                return Err(Error::validation(
                    record(),
                    format!("class_id {} out of range (have {c} classes)", gt.class_id),
                ));
            }
            gt.bbox
                .validate()
                .map_err(|e| Error::validation(record(), e.to_string()))?;
            if gt.bbox.area() <= 0.0 {
                return Err(Error::validation(record(), "ground-truth box has zero area"));
            }
        }
        Ok(())
    }

    fn validate_frames(&self) -> Result<()> {
        let indexed = self.images.iter().filter(|im| im.frame_index.is_some()).count();
        if indexed == 0 {
            return Ok(());
        }
        if indexed != self.images.len() {
            return Err(Error::validation(
                "images",
                "frame_index must be set on all images or on none",
            ));
        }
        let mut frames: Vec<u32> = self.images.iter().filter_map(|im| im.frame_index).collect();
        frames.sort_unstable();
        for pair in frames.windows(2) {
            if pair[1] != pair[0] + 1 {
                return Err(Error::validation(
                    "images",
                    format!(
                        "frame_index values must be unique and consecutive (found {} then {})",
                        pair[0], pair[1]
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Detections in the on-disk order: by image id, detector id, then descending score.
    pub fn canonical_detection_order(&mut self) {
        self.detections.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then(a.detector_id.cmp(&b.detector_id))
                .then(b.score.total_cmp(&a.score))
        });
    }
}

/// Descending score, ties to the lower detector id. Used with a stable sort so
/// remaining ties keep input order.
pub(crate) fn by_confidence(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.detector_id.cmp(&b.detector_id))
}

pub fn group_by_image(detections: &[Detection]) -> BTreeMap<String, Vec<Detection>> {
    let mut map: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        map.entry(d.image_id.clone()).or_default().push(d.clone());
    }
    map
}

/// Converts an `[x, y, width, height]` box to corner form.
pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<BoundingBox> {
    if w < 0.0 || h < 0.0 {
        return Err(Error::validation(
            "xywh box",
            format!("negative width or height ({w}, {h})"),
        ));
    }
    BoundingBox::new(x, y, x + w, y + h)
}

/// Serializes a bundle exactly as `save_bundle` writes it.
pub fn to_canonical_json(bundle: &DatasetBundle) -> Result<String> {
    let mut sorted = bundle.clone();
    sorted.canonical_detection_order();
    json::to_fixed6_string(&sorted)
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let text = to_canonical_json(bundle)?;
    json::write_atomic(path, text.as_bytes())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let bundle: DatasetBundle = json::read_json(path)?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn parse_bundle(text: &str) -> Result<DatasetBundle> {
    let bundle: DatasetBundle = serde_json::from_str(text).map_err(|source| Error::Parse {
        path: "<memory>".into(),
        source,
    })?;
    bundle.validate()?;
    Ok(bundle)
}

//! Baseline fusion: pool every detector's boxes and run class-wise NMS.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{by_confidence, DatasetBundle, Detection};
use crate::error::{Error, Result};
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    /// Boxes overlapping a kept box by strictly more than this are suppressed.
    pub iou_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig { iou_threshold: 0.5 }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "nms iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Class-wise greedy NMS over the detections of one image. Kept detections
/// are returned unmodified, most confident first.
pub fn nms_fuse(detections: &[Detection], config: &NmsConfig) -> Vec<Detection> {
    let mut per_class: BTreeMap<u32, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        per_class.entry(d.class_id).or_default().push(d);
    }

    let mut kept: Vec<Detection> = Vec::new();
    for (_, mut boxes) in per_class {
        boxes.sort_by(|a, b| by_confidence(a, b));
        let mut suppressed = vec![false; boxes.len()];
        for i in 0..boxes.len() {
            if suppressed[i] {
                continue;
            }
            kept.push(boxes[i].clone());
            for j in (i + 1)..boxes.len() {
                if !suppressed[j] && iou(&boxes[i].bbox, &boxes[j].bbox) > config.iou_threshold {
                    suppressed[j] = true;
                }
            }
        }
    }
    kept.sort_by(by_confidence);
    kept
}

/// Runs `nms_fuse` on every image of the bundle. Detector names are kept since
/// surviving boxes retain their source detector.
pub fn nms_fuse_bundle(bundle: &DatasetBundle, config: &NmsConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let detections = bundle
        .detections_by_image()
        .par_iter()
        .map(|(_, dets)| nms_fuse(dets, config))
        .collect::<Vec<_>>()
        .concat();
    Ok(DatasetBundle {
        detections,
        ..bundle.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn det(det_id: usize, class: u32, score: f64, b: [f64; 4]) -> Detection {
        Detection::new("img", det_id, class, score, BoundingBox::from_array(b))
    }

    #[test]
    fn single_detection_is_kept() {
        let d = det(0, 0, 0.3, [0.0, 0.0, 5.0, 5.0]);
        assert_eq!(nms_fuse(std::slice::from_ref(&d), &NmsConfig::default()), vec![d]);
    }

    #[test]
    fn suppresses_overlapping_same_class() {
        // iou((0,0,10,10),(1,1,11,11)) = 81/119 ~ 0.681 > 0.5
        let b1 = det(0, 0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let b2 = det(1, 0, 0.8, [1.0, 1.0, 11.0, 11.0]);
        let b3 = det(2, 0, 0.7, [20.0, 20.0, 30.0, 30.0]);
        assert!((iou(&b1.bbox, &b2.bbox) - 81.0 / 119.0).abs() < 1e-15);
        let out = nms_fuse(&[b3.clone(), b2, b1.clone()], &NmsConfig::default());
        assert_eq!(out, vec![b1, b3]);
    }

    #[test]
    fn classes_are_independent() {
        let a = det(0, 0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let b = det(1, 1, 0.8, [0.0, 0.0, 10.0, 9.0]);
        assert!(iou(&a.bbox, &b.bbox) >= 0.9);
        assert_eq!(nms_fuse(&[a.clone(), b.clone()], &NmsConfig::default()).len(), 2);
    }

    #[test]
    fn exactly_at_threshold_survives() {
        // overlap 50, union 150 -> 1/3
        let a = det(0, 0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        let b = det(1, 0, 0.8, [5.0, 0.0, 15.0, 10.0]);
        let cfg = NmsConfig { iou_threshold: iou(&a.bbox, &b.bbox) };
        assert_eq!(nms_fuse(&[a, b], &cfg).len(), 2);
    }

    #[test]
    fn ties_prefer_lower_detector() {
        let a = det(2, 0, 0.5, [0.0, 0.0, 10.0, 10.0]);
        let b = det(0, 0, 0.5, [0.0, 0.0, 10.0, 10.5]);
        let out = nms_fuse(&[a, b.clone()], &NmsConfig::default());
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(NmsConfig { iou_threshold: 0.0 }.validate().is_err());
        assert!(NmsConfig { iou_threshold: 1.5 }.validate().is_err());
        NmsConfig { iou_threshold: 1.0 }.validate().unwrap();
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0usize..3, 0u32..2, 0.0..1.0f64, 0.0..40.0f64, 0.0..40.0f64, 1.0..20.0f64, 1.0..20.0f64),
            0..25,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(d, c, s, x, y, w, h)| det(d, c, s, [x, y, x + w, y + h]))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_properties(dets in arb_dets(), theta in 0.1..0.9f64) {
            let cfg = NmsConfig { iou_threshold: theta };
            let out = nms_fuse(&dets, &cfg);
            for o in &out {
                prop_assert!(dets.contains(o));
            }
            for (i, a) in out.iter().enumerate() {
                for b in &out[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= theta);
                    }
                }
            }
            for class in 0..2u32 {
                let best = dets.iter().filter(|d| d.class_id == class).min_by(|a, b| by_confidence(a, b));
                if let Some(best) = best {
                    prop_assert!(out.iter().any(|o| o == best));
                }
            }
            prop_assert_eq!(nms_fuse(&out, &cfg), out);
        }
    }
}

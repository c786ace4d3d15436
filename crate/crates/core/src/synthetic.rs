//! Seeded virtual detectors: jittered, miscalibrated copies of ground truth
//! plus random false positives, and generators for the ground truth itself.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, Detection, GroundTruthBox, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::json;

/// Score of a perfectly placed, unbiased detection.
pub const BASE_SCORE: f64 = 0.8;
/// Score lost per unit of relative corner jitter.
pub const JITTER_SCORE_SLOPE: f64 = 2.0;
/// Score range of false positives.
pub const FALSE_POSITIVE_SCORES: (f64, f64) = (0.05, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorProfile {
    /// Corner noise standard deviation as a fraction of box width/height.
    pub jitter_sigma: f64,
    pub miss_prob: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub score_bias: f64,
    pub score_noise_sigma: f64,
}

impl DetectorProfile {
    pub const NOISELESS: DetectorProfile = DetectorProfile {
        jitter_sigma: 0.0,
        miss_prob: 0.0,
        fp_rate: 0.0,
        score_bias: 0.0,
        score_noise_sigma: 0.0,
    };

    pub fn validate(&self, index: usize) -> Result<()> {
        let record = format!("profile {index}");
        let finite = [self.jitter_sigma, self.miss_prob, self.fp_rate, self.score_bias, self.score_noise_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation(record, "non-finite parameter"));
        }
        if !(0.0..1.0).contains(&self.miss_prob) && self.miss_prob != 1.0 {
            return Err(Error::validation(record, format!("miss_prob {} outside [0, 1]", self.miss_prob)));
        }
        if self.fp_rate < 0.0 || self.jitter_sigma < 0.0 || self.score_noise_sigma < 0.0 {
            return Err(Error::validation(record, "rates and sigmas must be non-negative"));
        }
        Ok(())
    }
}

/// Three detectors with distinct precision and calibration: a precise,
/// slightly overconfident one, a loose one with the best recall, and an
/// underconfident one in between.
pub fn reference_profiles() -> Vec<DetectorProfile> {
    vec![
        DetectorProfile { jitter_sigma: 0.06, miss_prob: 0.08, fp_rate: 0.3, score_bias: 0.05, score_noise_sigma: 0.05 },
        DetectorProfile { jitter_sigma: 0.10, miss_prob: 0.04, fp_rate: 0.5, score_bias: 0.0, score_noise_sigma: 0.05 },
        DetectorProfile { jitter_sigma: 0.08, miss_prob: 0.08, fp_rate: 0.4, score_bias: -0.05, score_noise_sigma: 0.05 },
    ]
}

pub fn load_profiles(path: &Path) -> Result<Vec<DetectorProfile>> {
    let profiles: Vec<DetectorProfile> = json::read_json(path)?;
    for (i, p) in profiles.iter().enumerate() {
        p.validate(i)?;
    }
    Ok(profiles)
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn jittered(gt: &BoundingBox, sigma: f64, width: f64, height: f64, rng: &mut ChaCha8Rng) -> (BoundingBox, f64) {
    let (w, h) = (gt.width(), gt.height());
    let rel: [f64; 4] = std::array::from_fn(|_| sigma * normal(rng));
    let c = gt.as_array();
    let raw = [c[0] + rel[0] * w, c[1] + rel[1] * h, c[2] + rel[2] * w, c[3] + rel[3] * h];
    let (x1, x2) = (raw[0].min(raw[2]).clamp(0.0, width), raw[0].max(raw[2]).clamp(0.0, width));
    let (y1, y2) = (raw[1].min(raw[3]).clamp(0.0, height), raw[1].max(raw[3]).clamp(0.0, height));
    let magnitude = (rel.iter().map(|r| r * r).sum::<f64>() / 4.0).sqrt();
    (BoundingBox { x1, y1, x2, y2 }, magnitude)
}

fn detector_outputs(
    image: &ImageRecord,
    gts: &[&GroundTruthBox],
    detector_id: usize,
    profile: &DetectorProfile,
    classes: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<Detection> {
    let (width, height) = (image.width as f64, image.height as f64);
    let mut out = Vec::new();
    for gt in gts {
        if rng.random::<f64>() < profile.miss_prob {
            continue;
        }
        let (bbox, magnitude) = jittered(&gt.bbox, profile.jitter_sigma, width, height, rng);
        let noise = profile.score_noise_sigma * normal(rng);
        let score = (BASE_SCORE - JITTER_SCORE_SLOPE * magnitude + profile.score_bias + noise).clamp(0.0, 1.0);
        out.push(Detection::new(image.image_id.clone(), detector_id, gt.class_id, score, bbox));
    }

    let count = if profile.fp_rate > 0.0 {
        Poisson::new(profile.fp_rate).map(|p| p.sample(rng) as usize).unwrap_or(0)
    } else {
        0
    };
    for _ in 0..count {
        let w = rng.random_range(0.05..0.4) * width;
        let h = rng.random_range(0.05..0.4) * height;
        let x1 = rng.random_range(0.0..=(width - w));
        let y1 = rng.random_range(0.0..=(height - h));
        let class_id = rng.random_range(0..classes.max(1));
        let score = rng.random_range(FALSE_POSITIVE_SCORES.0..=FALSE_POSITIVE_SCORES.1);
        out.push(Detection::new(
            image.image_id.clone(),
            detector_id,
            class_id,
            score,
            BoundingBox { x1, y1, x2: x1 + w, y2: y1 + h },
        ));
    }
    out
}

/// Generates one detector per profile from the bundle's ground truth. The
/// result keeps images, classes and ground truth, and replaces detectors
/// and detections. Each (image, detector) pair draws from its own random
/// substream, so output does not depend on thread scheduling.
pub fn generate(ground_truth: &DatasetBundle, profiles: &[DetectorProfile], seed: u64) -> Result<DatasetBundle> {
    if profiles.is_empty() {
        return Err(Error::Config("at least one detector profile is required".into()));
    }
    for (i, p) in profiles.iter().enumerate() {
        p.validate(i)?;
    }
    let gt_by_image = ground_truth.ground_truth_by_image();
    let classes = ground_truth.class_names.len() as u32;
    let d = profiles.len() as u64;

    let detections = ground_truth
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let gts = gt_by_image.get(image.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            profiles
                .iter()
                .enumerate()
                .flat_map(|(j, profile)| {
                    let mut rng = substream(seed, i as u64 * d + j as u64);
                    detector_outputs(image, gts, j, profile, classes, &mut rng)
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat();

    Ok(DatasetBundle {
        detector_names: (0..profiles.len()).map(|j| format!("synthetic-{j}")).collect(),
        detections,
        ..ground_truth.clone()
    })
}

/// Random still images with objects of random class, size and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub class_names: Vec<String>,
    pub objects_per_image: (usize, usize),
    /// Box side as a fraction of the image side.
    pub size_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            images: 300,
            width: 640,
            height: 480,
            class_names: vec!["person".into(), "car".into(), "dog".into()],
            objects_per_image: (1, 4),
            size_range: (0.1, 0.4),
        }
    }
}

/// Ground-truth-only bundle of random scenes.
pub fn random_scenes(config: &SceneConfig, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width as f64, config.height as f64);
    let classes = config.class_names.len().max(1) as u32;
    let mut images = Vec::with_capacity(config.images);
    let mut ground_truth = Vec::new();
    for i in 0..config.images {
        let id = format!("img{i:05}");
        images.push(ImageRecord::new(id.clone(), config.width, config.height));
        let count = rng.random_range(config.objects_per_image.0..=config.objects_per_image.1);
        for _ in 0..count {
            let bw = rng.random_range(config.size_range.0..=config.size_range.1) * w;
            let bh = rng.random_range(config.size_range.0..=config.size_range.1) * h;
            let x1 = rng.random_range(0.0..=(w - bw));
            let y1 = rng.random_range(0.0..=(h - bh));
            ground_truth.push(GroundTruthBox::new(
                id.clone(),
                rng.random_range(0..classes),
                BoundingBox { x1, y1, x2: x1 + bw, y2: y1 + bh },
            ));
        }
    }
    DatasetBundle {
        detector_names: Vec::new(),
        class_names: config.class_names.clone(),
        images,
        detections: Vec::new(),
        ground_truth,
    }
}

/// Video of constant-velocity boxes bouncing off the frame borders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoConfig {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub class_names: Vec<String>,
    pub objects: usize,
    pub size_range: (f64, f64),
    /// Maximum speed in pixels per frame along each axis.
    pub max_speed: f64,
    /// Per-frame chance that a visible object starts a detection dropout.
    pub dropout_prob: f64,
    /// Dropouts last between 1 and this many frames.
    pub max_dropout_len: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            frames: 200,
            width: 640,
            height: 480,
            class_names: vec!["person".into()],
            objects: 4,
            size_range: (0.12, 0.3),
            max_speed: 3.0,
            dropout_prob: 0.0,
            max_dropout_len: 3,
        }
    }
}

/// Ground truth of a synthetic video, and the subset of it that detectors
/// get to see (everything outside dropout windows).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoWorld {
    pub truth: DatasetBundle,
    pub detectable: DatasetBundle,
    /// Number of (object, frame) boxes hidden by dropouts.
    pub hidden: usize,
}

pub fn video_world(config: &VideoConfig, seed: u64) -> VideoWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width as f64, config.height as f64);
    let classes = config.class_names.len().max(1) as u32;

    struct Object {
        class_id: u32,
        bbox: BoundingBox,
        velocity: (f64, f64),
        dropout_left: usize,
    }
    let mut objects: Vec<Object> = (0..config.objects)
        .map(|_| {
            let bw = rng.random_range(config.size_range.0..=config.size_range.1) * w;
            let bh = rng.random_range(config.size_range.0..=config.size_range.1) * h;
            let x1 = rng.random_range(0.0..=(w - bw));
            let y1 = rng.random_range(0.0..=(h - bh));
            let vx = rng.random_range(-config.max_speed..=config.max_speed);
            let vy = rng.random_range(-config.max_speed..=config.max_speed);
            Object {
                class_id: rng.random_range(0..classes),
                bbox: BoundingBox { x1, y1, x2: x1 + bw, y2: y1 + bh },
                velocity: (vx, vy),
                dropout_left: 0,
            }
        })
        .collect();

    let mut images = Vec::with_capacity(config.frames);
    let mut truth = Vec::new();
    let mut visible = Vec::new();
    let mut hidden = 0;
    for f in 0..config.frames {
        let id = format!("frame{f:05}");
        images.push(ImageRecord::frame(id.clone(), config.width, config.height, f as u32));
        for obj in objects.iter_mut() {
            let gt = GroundTruthBox::new(id.clone(), obj.class_id, obj.bbox);
            if obj.dropout_left == 0
                && config.dropout_prob > 0.0
                && rng.random::<f64>() < config.dropout_prob
            {
                obj.dropout_left = rng.random_range(1..=config.max_dropout_len.max(1));
            }
            if obj.dropout_left > 0 {
                obj.dropout_left -= 1;
                hidden += 1;
            } else {
                visible.push(gt.clone());
            }
            truth.push(gt);

            let (mut vx, mut vy) = obj.velocity;
            let mut b = obj.bbox.translate(vx, vy);
            if b.x1 < 0.0 || b.x2 > w {
                vx = -vx;
                b = obj.bbox.translate(vx, vy);
            }
            if b.y1 < 0.0 || b.y2 > h {
                vy = -vy;
                b = obj.bbox.translate(vx, vy);
            }
            obj.velocity = (vx, vy);
            obj.bbox = b;
        }
    }

    let base = DatasetBundle {
        detector_names: Vec::new(),
        class_names: config.class_names.clone(),
        images,
        detections: Vec::new(),
        ground_truth: Vec::new(),
    };
    VideoWorld {
        truth: DatasetBundle {
            ground_truth: truth,
            ..base.clone()
        },
        detectable: DatasetBundle {
            ground_truth: visible,
            ..base
        },
        hidden,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::to_canonical_json;

    fn scenes() -> DatasetBundle {
        random_scenes(&SceneConfig { images: 20, ..SceneConfig::default() }, 3)
    }

    #[test]
    fn noiseless_profile_copies_ground_truth() {
        let gt = scenes();
        let out = generate(&gt, &[DetectorProfile::NOISELESS], 1).unwrap();
        assert_eq!(out.detections.len(), gt.ground_truth.len());
        for (d, g) in out.detections.iter().zip(&gt.ground_truth) {
            assert_eq!(d.bbox, g.bbox);
            assert_eq!(d.class_id, g.class_id);
            assert_eq!(d.image_id, g.image_id);
            assert_eq!(d.score, BASE_SCORE);
        }
        out.validate().unwrap();
    }

    #[test]
    fn certain_miss_and_no_false_positives_is_empty() {
        let p = DetectorProfile { miss_prob: 1.0, ..DetectorProfile::NOISELESS };
        assert!(generate(&scenes(), &[p], 1).unwrap().detections.is_empty());
    }

    #[test]
    fn seed_determinism() {
        let gt = scenes();
        let p = DetectorProfile {
            jitter_sigma: 0.05,
            miss_prob: 0.1,
            fp_rate: 0.5,
            score_bias: 0.0,
            score_noise_sigma: 0.05,
        };
        let a = to_canonical_json(&generate(&gt, &[p, p], 7).unwrap()).unwrap();
        let b = to_canonical_json(&generate(&gt, &[p, p], 7).unwrap()).unwrap();
        let c = to_canonical_json(&generate(&gt, &[p, p], 8).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generated_bundles_validate() {
        let p = DetectorProfile {
            jitter_sigma: 0.3,
            miss_prob: 0.2,
            fp_rate: 2.0,
            score_bias: 0.5,
            score_noise_sigma: 0.3,
        };
        generate(&scenes(), &[p; 3], 11).unwrap().validate().unwrap();
    }

    #[test]
    fn rejects_bad_profiles() {
        let p = DetectorProfile { miss_prob: 1.5, ..DetectorProfile::NOISELESS };
        assert!(generate(&scenes(), &[p], 0).is_err());
        let p = DetectorProfile { jitter_sigma: -0.1, ..DetectorProfile::NOISELESS };
        assert!(generate(&scenes(), &[p], 0).is_err());
        assert!(generate(&scenes(), &[], 0).is_err());
    }

    #[test]
    fn video_world_is_valid_and_hides_dropouts() {
        let cfg = VideoConfig { frames: 120, dropout_prob: 0.05, ..VideoConfig::default() };
        let world = video_world(&cfg, 4);
        world.truth.validate().unwrap();
        world.detectable.validate().unwrap();
        assert_eq!(world.truth.ground_truth.len(), 120 * cfg.objects);
        assert!(world.hidden > 0);
        assert_eq!(world.detectable.ground_truth.len() + world.hidden, world.truth.ground_truth.len());
        for g in &world.truth.ground_truth {
            assert!(g.bbox.x1 >= 0.0 && g.bbox.x2 <= 640.0 && g.bbox.y1 >= 0.0 && g.bbox.y2 <= 480.0);
        }
    }

    #[test]
    fn profiles_json_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        std::fs::write(
            &p,
            r#"[{"jitter_sigma":0.05,"miss_prob":0.1,"fp_rate":0.3,"score_bias":-0.1,"score_noise_sigma":0.02}]"#,
        )
        .unwrap();
        let profiles = load_profiles(&p).unwrap();
        assert_eq!(profiles[0].score_bias, -0.1);
    }
}

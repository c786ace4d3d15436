//! Two-stage temporal refinement for video.
//!
//! Stage 1 runs one box tracker per object, buffers its predictions while
//! detections are missing and inserts them once the object is re-detected.
//! Stage 2 links detections frame to frame and deletes short-lived sequences.

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, Detection};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Box-space motion model driven by the refinement stages.
pub trait BoxTracker {
    fn initialize(&mut self, bbox: BoundingBox);
    /// Advances one frame and returns the predicted box.
    fn predict(&mut self) -> BoundingBox;
    fn correct(&mut self, bbox: BoundingBox);
}

/// Constant-velocity tracker with an exponentially smoothed per-coordinate velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantVelocityTracker {
    smoothing: f64,
    state: BoundingBox,
    last_corrected: BoundingBox,
    velocity: [f64; 4],
    steps_since_correct: u32,
}

impl ConstantVelocityTracker {
    pub const DEFAULT_SMOOTHING: f64 = 0.5;

    pub fn new(smoothing: f64) -> Self {
        ConstantVelocityTracker {
            smoothing,
            state: BoundingBox::ZERO,
            last_corrected: BoundingBox::ZERO,
            velocity: [0.0; 4],
            steps_since_correct: 0,
        }
    }

    pub fn velocity(&self) -> [f64; 4] {
        self.velocity
    }
}

impl Default for ConstantVelocityTracker {
    fn default() -> Self {
        ConstantVelocityTracker::new(Self::DEFAULT_SMOOTHING)
    }
}

impl BoxTracker for ConstantVelocityTracker {
    fn initialize(&mut self, bbox: BoundingBox) {
        self.state = bbox;
        self.last_corrected = bbox;
        self.velocity = [0.0; 4];
        self.steps_since_correct = 0;
    }

    fn predict(&mut self) -> BoundingBox {
        let s = self.state.as_array();
        self.state = BoundingBox::from_array(std::array::from_fn(|k| s[k] + self.velocity[k]));
        self.steps_since_correct += 1;
        self.state
    }

    fn correct(&mut self, bbox: BoundingBox) {
        let steps = self.steps_since_correct.max(1) as f64;
        let (new, old) = (bbox.as_array(), self.last_corrected.as_array());
        for k in 0..4 {
            let observed = (new[k] - old[k]) / steps;
            self.velocity[k] = (1.0 - self.smoothing) * self.velocity[k] + self.smoothing * observed;
        }
        self.state = bbox;
        self.last_corrected = bbox;
        self.steps_since_correct = 0;
    }
}

pub fn default_box_tracker() -> ConstantVelocityTracker {
    ConstantVelocityTracker::default()
}

/// Score given to boxes recovered from tracker predictions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveredScore {
    /// Score of the tracklet's most recent matched detection.
    #[default]
    LastMatched,
    Fixed(f64),
}

/// Which match count the early-death rule compares against `min_matched_frames`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCount {
    /// All frames the tracklet was ever matched in.
    #[default]
    Total,
    /// Length of the matched run preceding the current miss streak.
    Consecutive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub match_iou: f64,
    /// Threshold for tracklets no older than `young_age_frames`.
    pub young_match_iou: f64,
    pub young_age_frames: u32,
    pub min_matched_frames: u32,
    pub max_miss_young: u32,
    pub max_miss: u32,
    pub min_track_length: usize,
    pub recovered_score: RecoveredScore,
    pub match_count: MatchCount,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            match_iou: 0.5,
            young_match_iou: 0.4,
            young_age_frames: 3,
            min_matched_frames: 5,
            max_miss_young: 5,
            max_miss: 50,
            min_track_length: 5,
            recovered_score: RecoveredScore::LastMatched,
            match_count: MatchCount::Total,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.young_match_iou < self.match_iou) {
            return Err(Error::Config("young_match_iou must be below match_iou".into()));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0 && self.young_match_iou > 0.0) {
            return Err(Error::Config("match thresholds must lie in (0, 1]".into()));
        }
        if self.young_age_frames == 0
            || self.min_matched_frames == 0
            || self.max_miss_young == 0
            || self.max_miss == 0
            || self.min_track_length == 0
        {
            return Err(Error::Config("refinement counts must be positive".into()));
        }
        if let RecoveredScore::Fixed(v) = self.recovered_score {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fixed recovered score {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Detections of one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_index: u32,
    pub image_id: String,
    pub detections: Vec<Detection>,
}

/// Splits a video bundle into frames ordered by frame index.
pub fn frames_from_bundle(bundle: &DatasetBundle) -> Result<Vec<Frame>> {
    let order = bundle.frames_in_order()?;
    let mut groups = crate::dataset::group_by_image(&bundle.detections);
    Ok(order
        .into_iter()
        .map(|im| Frame {
            frame_index: im.frame_index.expect("checked by frames_in_order"),
            image_id: im.image_id.clone(),
            detections: groups.remove(&im.image_id).unwrap_or_default(),
        })
        .collect())
}

pub fn check_consecutive(frames: &[Frame]) -> Result<()> {
    for pair in frames.windows(2) {
        if pair[1].frame_index != pair[0].frame_index + 1 {
            return Err(Error::validation(
                format!("frame {}", pair[1].frame_index),
                format!("does not follow frame {}", pair[0].frame_index),
            ));
        }
    }
    Ok(())
}

#[derive(Debug)]
struct Tracklet<T> {
    class_id: u32,
    tracker: T,
    matched_frames: u32,
    matched_run: u32,
    consecutive_misses: u32,
    age_frames: u32,
    /// (frame position, predicted box) for the current miss streak.
    gap_buffer: Vec<(usize, BoundingBox)>,
    last_matched_score: f64,
    last_detector_id: usize,
}

impl<T: BoxTracker> Tracklet<T> {
    fn spawn(det: &Detection, mut tracker: T) -> Self {
        tracker.initialize(det.bbox);
        Tracklet {
            class_id: det.class_id,
            tracker,
            matched_frames: 1,
            matched_run: 1,
            consecutive_misses: 0,
            age_frames: 0,
            gap_buffer: Vec::new(),
            last_matched_score: det.score,
            last_detector_id: det.detector_id,
        }
    }

    fn is_dead(&self, config: &RefineConfig) -> bool {
        let matched = match config.match_count {
            MatchCount::Total => self.matched_frames,
            MatchCount::Consecutive => self.matched_run,
        };
        let short_lived =
            matched <= config.min_matched_frames && self.consecutive_misses > config.max_miss_young;
        short_lived || self.consecutive_misses > config.max_miss
    }
}

/// Greedy one-to-one assignment by descending IoU. `candidates` holds
/// `(iou, left, right)`; ties resolve to lower indices.
fn greedy_assign(
    mut candidates: Vec<(f64, usize, usize)>,
    left: usize,
    right: usize,
) -> Vec<(usize, usize)> {
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut left_used = vec![false; left];
    let mut right_used = vec![false; right];
    let mut out = Vec::new();
    for (_, l, r) in candidates {
        if !left_used[l] && !right_used[r] {
            left_used[l] = true;
            right_used[r] = true;
            out.push((l, r));
        }
    }
    out
}

/// Stage 1: fills detection gaps with tracker predictions.
///
/// Output frames contain every input detection plus recovered boxes (flagged
/// `recovered`) for frames inside a miss streak that ended in a re-match.
pub fn stage1_fill_gaps<T, F>(
    frames: &[Frame],
    config: &RefineConfig,
    mut new_tracker: F,
) -> Result<Vec<Frame>>
where
    T: BoxTracker,
    F: FnMut() -> T,
{
    config.validate()?;
    check_consecutive(frames)?;
    let mut out: Vec<Frame> = frames.to_vec();
    let mut tracklets: Vec<Tracklet<T>> = Vec::new();

    for (pos, frame) in frames.iter().enumerate() {
        let dets = &frame.detections;
        if pos == 0 {
            tracklets.extend(dets.iter().map(|d| Tracklet::spawn(d, new_tracker())));
            continue;
        }

        let predictions: Vec<BoundingBox> = tracklets
            .iter_mut()
            .map(|t| {
                t.age_frames += 1;
                t.tracker.predict()
            })
            .collect();

        let mut candidates = Vec::new();
        for (ti, t) in tracklets.iter().enumerate() {
            let threshold = if t.age_frames <= config.young_age_frames {
                config.young_match_iou
            } else {
                config.match_iou
            };
            for (di, d) in dets.iter().enumerate() {
                if d.class_id != t.class_id {
                    continue;
                }
                let overlap = iou(&predictions[ti], &d.bbox);
                if overlap > threshold {
                    candidates.push((overlap, ti, di));
                }
            }
        }
        let matches = greedy_assign(candidates, tracklets.len(), dets.len());

        let mut tracklet_matched = vec![false; tracklets.len()];
        let mut det_matched = vec![false; dets.len()];
        for (ti, di) in matches {
            tracklet_matched[ti] = true;
            det_matched[di] = true;
            let det = &dets[di];
            let t = &mut tracklets[ti];
            t.tracker.correct(det.bbox);
            t.matched_frames += 1;
            if t.consecutive_misses > 0 {
                t.matched_run = 1;
                let score = match config.recovered_score {
                    RecoveredScore::LastMatched => t.last_matched_score,
                    RecoveredScore::Fixed(v) => v,
                };
                for (gap_pos, bbox) in t.gap_buffer.drain(..) {
                    let target = &mut out[gap_pos];
                    target.detections.push(Detection {
                        image_id: target.image_id.clone(),
                        detector_id: t.last_detector_id,
                        class_id: t.class_id,
                        score,
                        bbox,
                        recovered: true,
                    });
                }
            } else {
                t.matched_run += 1;
            }
            t.consecutive_misses = 0;
            t.last_matched_score = det.score;
            t.last_detector_id = det.detector_id;
        }

        for (ti, t) in tracklets.iter_mut().enumerate() {
            if !tracklet_matched[ti] {
                t.consecutive_misses += 1;
                t.gap_buffer.push((pos, predictions[ti]));
            }
        }
        // Dead tracklets take their buffered predictions with them.
        tracklets.retain(|t| !t.is_dead(config));

        for (di, d) in dets.iter().enumerate() {
            if !det_matched[di] {
                tracklets.push(Tracklet::spawn(d, new_tracker()));
            }
        }
    }
    Ok(out)
}

/// Stage 2: removes detections whose frame-to-frame sequence is shorter than
/// `min_track_length` frames. Frames must be consecutive.
pub fn stage2_prune_short_tracks(frames: &[Frame], config: &RefineConfig) -> Vec<Frame> {
    struct Sequence {
        class_id: u32,
        tail: BoundingBox,
        members: Vec<(usize, usize)>,
    }

    let mut sequences: Vec<Sequence> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for (pos, frame) in frames.iter().enumerate() {
        let dets = &frame.detections;
        let mut candidates = Vec::new();
        for (ai, &si) in active.iter().enumerate() {
            let seq = &sequences[si];
            for (di, d) in dets.iter().enumerate() {
                if d.class_id == seq.class_id {
                    let overlap = iou(&seq.tail, &d.bbox);
                    if overlap > config.match_iou {
                        candidates.push((overlap, ai, di));
                    }
                }
            }
        }
        let matches = greedy_assign(candidates, active.len(), dets.len());

        let mut next_active = Vec::with_capacity(dets.len());
        let mut det_matched = vec![false; dets.len()];
        for (ai, di) in matches {
            let si = active[ai];
            det_matched[di] = true;
            sequences[si].tail = dets[di].bbox;
            sequences[si].members.push((pos, di));
            next_active.push(si);
        }
        for (di, d) in dets.iter().enumerate() {
            if !det_matched[di] {
                next_active.push(sequences.len());
                sequences.push(Sequence {
                    class_id: d.class_id,
                    tail: d.bbox,
                    members: vec![(pos, di)],
                });
            }
        }
        active = next_active;
    }

    let mut keep: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.detections.len()]).collect();
    for seq in sequences.iter().filter(|s| s.members.len() >= config.min_track_length) {
        for &(pos, di) in &seq.members {
            keep[pos][di] = true;
        }
    }
    frames
        .iter()
        .zip(keep)
        .map(|(f, k)| Frame {
            frame_index: f.frame_index,
            image_id: f.image_id.clone(),
            detections: f
                .detections
                .iter()
                .zip(k)
                .filter(|(_, keep)| *keep)
                .map(|(d, _)| d.clone())
                .collect(),
        })
        .collect()
}

/// Both stages with a caller-supplied tracker.
pub fn refine_frames<T, F>(frames: &[Frame], config: &RefineConfig, new_tracker: F) -> Result<Vec<Frame>>
where
    T: BoxTracker,
    F: FnMut() -> T,
{
    let filled = stage1_fill_gaps(frames, config, new_tracker)?;
    Ok(stage2_prune_short_tracks(&filled, config))
}

/// Refines a video bundle with the default constant-velocity tracker.
pub fn refine_bundle(bundle: &DatasetBundle, config: &RefineConfig) -> Result<DatasetBundle> {
    let frames = frames_from_bundle(bundle)?;
    let refined = refine_frames(&frames, config, default_box_tracker)?;
    Ok(DatasetBundle {
        detections: refined.into_iter().flat_map(|f| f.detections).collect(),
        ..bundle.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(b: [f64; 4]) -> BoundingBox {
        BoundingBox::from_array(b)
    }

    #[test]
    fn tracker_smooths_velocity() {
        let mut t = default_box_tracker();
        t.initialize(bx([0.0, 0.0, 10.0, 10.0]));
        t.correct(bx([2.0, 0.0, 12.0, 10.0]));
        // v = 0.5 * 0 + 0.5 * 2 = 1
        assert_eq!(t.predict(), bx([3.0, 0.0, 13.0, 10.0]));
    }

    #[test]
    fn tracker_starts_still() {
        let mut t = default_box_tracker();
        t.initialize(bx([1.0, 2.0, 3.0, 4.0]));
        assert_eq!(t.predict(), bx([1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn tracker_stationary_object() {
        let mut t = default_box_tracker();
        let b = bx([5.0, 5.0, 15.0, 25.0]);
        t.initialize(b);
        for _ in 0..5 {
            t.predict();
            t.correct(b);
        }
        assert_eq!(t.predict(), b);
    }

    #[test]
    fn tracker_velocity_decays_when_object_stops() {
        let mut t = default_box_tracker();
        t.initialize(bx([0.0, 0.0, 10.0, 10.0]));
        t.predict();
        t.correct(bx([4.0, 0.0, 14.0, 10.0]));
        for _ in 0..60 {
            t.predict();
            t.correct(bx([4.0, 0.0, 14.0, 10.0]));
        }
        let p = t.predict();
        assert!((p.x1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tracker_accounts_for_skipped_frames() {
        let mut t = default_box_tracker();
        t.initialize(bx([0.0, 0.0, 10.0, 10.0]));
        t.predict();
        t.predict();
        t.correct(bx([4.0, 0.0, 14.0, 10.0]));
        // displacement 4 over 2 frames -> 2 per frame, smoothed to 1
        assert_eq!(t.velocity(), [1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        RefineConfig::default().validate().unwrap();
        let bad = RefineConfig { young_match_iou: 0.6, ..RefineConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RefineConfig { min_track_length: 0, ..RefineConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_consecutive_frames_rejected() {
        let frames = vec![
            Frame { frame_index: 0, image_id: "a".into(), detections: vec![] },
            Frame { frame_index: 2, image_id: "b".into(), detections: vec![] },
        ];
        let err = stage1_fill_gaps(&frames, &RefineConfig::default(), default_box_tracker).unwrap_err();
        assert_eq!(err.kind(), "validation");
    }

    #[test]
    fn empty_video() {
        let frames: Vec<Frame> = (0..10)
            .map(|i| Frame { frame_index: i, image_id: format!("f{i}"), detections: vec![] })
            .collect();
        let out = refine_frames(&frames, &RefineConfig::default(), default_box_tracker).unwrap();
        assert!(out.iter().all(|f| f.detections.is_empty()));
        assert!(refine_frames(&[], &RefineConfig::default(), default_box_tracker).unwrap().is_empty());
    }

    #[test]
    fn recovered_score_policy() {
        let mk = |i: u32, present: bool| Frame {
            frame_index: i,
            image_id: format!("f{i}"),
            detections: if present {
                vec![Detection::new(format!("f{i}"), 3, 0, 0.5 + i as f64 * 0.01, bx([0.0, 0.0, 10.0, 10.0]))]
            } else {
                vec![]
            },
        };
        let frames: Vec<Frame> = (0..6).map(|i| mk(i, i != 3)).collect();
        let out = stage1_fill_gaps(&frames, &RefineConfig::default(), default_box_tracker).unwrap();
        let rec = &out[3].detections;
        assert_eq!(rec.len(), 1);
        assert!(rec[0].recovered);
        assert_eq!(rec[0].score, 0.52);
        assert_eq!(rec[0].detector_id, 3);
        assert_eq!(rec[0].image_id, "f3");

        let cfg = RefineConfig { recovered_score: RecoveredScore::Fixed(0.1), ..RefineConfig::default() };
        let out = stage1_fill_gaps(&frames, &cfg, default_box_tracker).unwrap();
        assert_eq!(out[3].detections[0].score, 0.1);
    }

    #[test]
    fn consecutive_count_mode_kills_earlier() {
        // Matched 0..=9, missed 10..=11, matched 12, then gone. Under the
        // total count (11 matches) the tracklet survives past 6 misses; under
        // the consecutive count (run of 1) it dies after 6.
        let frames: Vec<Frame> = (0..30u32)
            .map(|i| Frame {
                frame_index: i,
                image_id: format!("f{i}"),
                detections: if i <= 9 || i == 12 {
                    vec![Detection::new(format!("f{i}"), 0, 0, 0.9, bx([0.0, 0.0, 10.0, 10.0]))]
                } else if i == 20 {
                    // Re-detected 8 frames after the last match.
                    vec![Detection::new(format!("f{i}"), 0, 0, 0.9, bx([0.0, 0.0, 10.0, 10.0]))]
                } else {
                    vec![]
                },
            })
            .collect();
        let total = stage1_fill_gaps(&frames, &RefineConfig::default(), default_box_tracker).unwrap();
        let recovered_total: usize = total.iter().map(|f| f.detections.iter().filter(|d| d.recovered).count()).sum();
        assert_eq!(recovered_total, 2 + 7);

        let cfg = RefineConfig { match_count: MatchCount::Consecutive, ..RefineConfig::default() };
        let run = stage1_fill_gaps(&frames, &cfg, default_box_tracker).unwrap();
        let recovered_run: usize = run.iter().map(|f| f.detections.iter().filter(|d| d.recovered).count()).sum();
        assert_eq!(recovered_run, 2);
    }
}

use detfuse::refine::{frames_from_bundle, refine_frames, Frame};
use detfuse::synthetic::{generate, reference_profiles, video_world, VideoConfig};
use detfuse::{
    default_box_tracker, stage1_fill_gaps, stage2_prune_short_tracks, BoundingBox, BoxTracker, Detection,
    RefineConfig,
};

fn bx(b: [f64; 4]) -> BoundingBox {
    BoundingBox::from_array(b)
}

fn video(n: u32, boxes: impl Fn(u32) -> Vec<BoundingBox>) -> Vec<Frame> {
    (0..n)
        .map(|f| {
            let id = format!("f{f:03}");
            Frame {
                frame_index: f,
                image_id: id.clone(),
                detections: boxes(f)
                    .into_iter()
                    .map(|b| Detection::new(id.clone(), 3, 0, 0.8, b))
                    .collect(),
            }
        })
        .collect()
}

fn moving(f: u32) -> BoundingBox {
    let x = 10.0 + 2.0 * f as f64;
    bx([x, 20.0, x + 40.0, 60.0])
}

fn recovered(frames: &[Frame]) -> Vec<(u32, Detection)> {
    frames
        .iter()
        .flat_map(|f| f.detections.iter().filter(|d| d.recovered).map(move |d| (f.frame_index, d.clone())))
        .collect()
}

fn same_set(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len() && a.iter().all(|d| b.contains(d))
}

#[test]
fn two_frame_gap_is_filled() {
    let frames = video(10, |f| if f == 5 || f == 6 { vec![] } else { vec![moving(f)] });
    let out = stage1_fill_gaps(&frames, &RefineConfig::default(), default_box_tracker).unwrap();
    let rec = recovered(&out);
    assert_eq!(rec.iter().map(|r| r.0).collect::<Vec<_>>(), vec![5, 6]);
    for (f, d) in &rec {
        assert_eq!(d.score, 0.8);
        assert_eq!(d.class_id, 0);
        assert_eq!(d.image_id, format!("f{f:03}"));
        // constant velocity has converged to 2 px/frame well before the gap
        assert!(d.bbox.iou(&moving(*f)) > 0.9, "{:?} vs {:?}", d.bbox, moving(*f));
    }
    for (a, b) in frames.iter().zip(&out) {
        assert!(a.detections.iter().all(|d| b.detections.contains(d)));
    }
}

#[test]
fn single_match_tracklet_dies_after_six_misses() {
    let still = bx([100.0, 100.0, 150.0, 150.0]);
    // seen at frame 0, then missed six times: gone before the re-detection
    let late = video(8, |f| if f == 0 || f == 7 { vec![still] } else { vec![] });
    let out = stage1_fill_gaps(&late, &RefineConfig::default(), default_box_tracker).unwrap();
    assert!(recovered(&out).is_empty());

    // five misses are survivable, and the gap is filled on re-match
    let early = video(7, |f| if f == 0 || f == 6 { vec![still] } else { vec![] });
    let out = stage1_fill_gaps(&early, &RefineConfig::default(), default_box_tracker).unwrap();
    assert_eq!(recovered(&out).iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);

    // never seen again: nothing inserted
    let once = video(20, |f| if f == 0 { vec![still] } else { vec![] });
    let out = stage1_fill_gaps(&once, &RefineConfig::default(), default_box_tracker).unwrap();
    assert!(recovered(&out).is_empty());
}

#[test]
fn short_tracks_are_pruned_at_the_boundary() {
    let a = bx([0.0, 0.0, 30.0, 30.0]);
    let b = bx([200.0, 200.0, 230.0, 230.0]);
    let frames = video(12, |f| {
        let mut v = Vec::new();
        if (1..6).contains(&f) {
            v.push(a);
        }
        if (6..10).contains(&f) {
            v.push(b);
        }
        v
    });
    let out = stage2_prune_short_tracks(&frames, &RefineConfig::default());
    for f in &out {
        let want: Vec<BoundingBox> = if (1..6).contains(&f.frame_index) { vec![a] } else { vec![] };
        assert_eq!(f.detections.iter().map(|d| d.bbox).collect::<Vec<_>>(), want, "frame {}", f.frame_index);
    }
}

#[test]
fn empty_video_stays_empty() {
    let frames = video(30, |_| vec![]);
    let out = refine_frames(&frames, &RefineConfig::default(), default_box_tracker).unwrap();
    assert!(out.iter().all(|f| f.detections.is_empty()));
}

#[test]
fn non_consecutive_frames_are_rejected() {
    let mut frames = video(5, |f| vec![moving(f)]);
    frames[3].frame_index = 7;
    let err = stage1_fill_gaps(&frames, &RefineConfig::default(), default_box_tracker).unwrap_err();
    assert_eq!(err.kind(), "validation");
}

fn synthetic_frames(seed: u64) -> Vec<Frame> {
    let config = VideoConfig {
        frames: 120,
        objects: 3,
        dropout_prob: 0.05,
        ..VideoConfig::default()
    };
    let world = video_world(&config, seed);
    let dets = generate(&world.detectable, &reference_profiles(), seed).unwrap();
    frames_from_bundle(&dets).unwrap()
}

#[test]
fn stage_invariants_on_random_videos() {
    let config = RefineConfig::default();
    for seed in 0..100 {
        let frames = synthetic_frames(seed);
        let filled = stage1_fill_gaps(&frames, &config, default_box_tracker).unwrap();
        assert_eq!(filled.len(), frames.len());
        for (a, b) in frames.iter().zip(&filled) {
            assert_eq!(a.frame_index, b.frame_index);
            assert!(a.detections.iter().all(|d| b.detections.contains(d)), "seed {seed}: stage 1 dropped a box");
            assert!(b.detections.iter().filter(|d| !a.detections.contains(d)).all(|d| d.recovered));
        }
        // every recovered box sits strictly inside the video's detected span
        for (f, d) in recovered(&filled) {
            let real = |g: &Frame| g.detections.iter().any(|x| !x.recovered && x.class_id == d.class_id);
            assert!(frames.iter().filter(|g| g.frame_index < f).any(real));
            assert!(frames.iter().filter(|g| g.frame_index > f).any(real));
        }

        let pruned = stage2_prune_short_tracks(&filled, &config);
        for (a, b) in filled.iter().zip(&pruned) {
            assert!(b.detections.iter().all(|d| a.detections.contains(d)), "seed {seed}: stage 2 added a box");
        }

        let again = refine_frames(&frames, &config, default_box_tracker).unwrap();
        assert_eq!(again, pruned);
    }
}

/// Tracker whose predictions are far outside any image.
struct OffScreen;

impl BoxTracker for OffScreen {
    fn initialize(&mut self, _: BoundingBox) {}
    fn predict(&mut self) -> BoundingBox {
        bx([-1e6, -1e6, -1e6 + 1.0, -1e6 + 1.0])
    }
    fn correct(&mut self, _: BoundingBox) {}
}

#[test]
fn identity_without_matches_or_pruning() {
    let config = RefineConfig { min_track_length: 1, ..RefineConfig::default() };
    for seed in 0..20 {
        let frames = synthetic_frames(seed);
        let out = refine_frames(&frames, &config, || OffScreen).unwrap();
        for (a, b) in frames.iter().zip(&out) {
            assert!(same_set(&a.detections, &b.detections), "seed {seed} frame {}", a.frame_index);
        }
    }
}

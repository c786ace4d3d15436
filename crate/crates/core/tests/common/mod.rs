//! Reference implementations and random instance generators shared by the
//! integration and acceptance tests. Nothing here calls into the library's
//! algorithms; only its data types are used.

#![allow(dead_code)]

use detfuse::{BoundingBox, Detection, GroundTruthBox, TrainingPair};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// VOC all-points AP by explicit enumeration: rank, match, list every PR
/// point, then for each distinct recall level take the best precision
/// reached at that recall or beyond.
pub fn brute_force_ap(detections: &[Detection], ground_truth: &[GroundTruthBox], threshold: f64, floor: f64) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].score >= floor).collect();
    // stable: equal (score, image) keeps input order
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then(da.image_id.cmp(&db.image_id))
    });

    let mut taken = vec![false; ground_truth.len()];
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let d = &detections[i];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in ground_truth.iter().enumerate() {
            if taken[gi] || g.image_id != d.image_id {
                continue;
            }
            let o = iou_ref(d.bbox.as_array(), g.bbox.as_array());
            let better = match best {
                None => o >= threshold,
                Some((b, _)) => o > b,
            };
            if better {
                best = Some((o, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            tp += 1;
        }
        let recall = tp as f64 / ground_truth.len() as f64;
        let precision = tp as f64 / (rank + 1) as f64;
        points.push((recall, precision));
    }

    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut area = 0.0;
    let mut previous = 0.0;
    for r in levels {
        let envelope = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (r - previous) * envelope;
        previous = r;
    }
    area
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoundingBox {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(1.0..extent * 0.3);
    let h = rng.random_range(1.0..extent * 0.3);
    BoundingBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn perturbed(rng: &mut ChaCha8Rng, b: BoundingBox, amount: f64) -> BoundingBox {
    let mut c = b.as_array();
    for v in &mut c {
        *v += rng.random_range(-amount..amount);
    }
    BoundingBox {
        x1: c[0].min(c[2]),
        y1: c[1].min(c[3]),
        x2: c[0].max(c[2]),
        y2: c[1].max(c[3]),
    }
}

/// Small single-class instance: up to 10 ground-truth boxes over a few
/// images and up to 20 detections, many of them near a ground-truth box so
/// both matches and duplicate/near misses occur. Scores come from a coarse
/// grid so ties happen.
pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let images = rng.random_range(1..=3);
    let n_gt = rng.random_range(0..=10);
    let n_det = rng.random_range(0..=20);
    let gts: Vec<GroundTruthBox> = (0..n_gt)
        .map(|_| {
            let img = format!("im{}", rng.random_range(0..images));
            GroundTruthBox::new(img, 0, random_box(rng, 100.0))
        })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let score = rng.random_range(0..=20) as f64 / 20.0;
            if !gts.is_empty() && rng.random_bool(0.7) {
                let g = &gts[rng.random_range(0..gts.len())];
                Detection::new(g.image_id.clone(), 0, 0, score, perturbed(rng, g.bbox, 6.0))
            } else {
                let img = format!("im{}", rng.random_range(0..images));
                Detection::new(img, 0, 0, score, random_box(rng, 100.0))
            }
        })
        .collect();
    (dets, gts)
}

/// Random training pair with `d` detectors; each detector is absent with
/// probability `p_absent`, but at least one is present.
pub fn random_pair(rng: &mut ChaCha8Rng, d: usize, p_absent: f64) -> TrainingPair {
    let forced = rng.random_range(0..d);
    let members: Vec<Option<([f64; 4], f64)>> = (0..d)
        .map(|j| {
            if j != forced && rng.random_bool(p_absent) {
                None
            } else {
                let b: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                Some((b, rng.random_range(0.1..1.0)))
            }
        })
        .collect();
    let target: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    TrainingPair::from_members(&members, target)
}

/// Pairs whose targets are exactly `w_star`ᵀX.
pub fn exact_linear_pairs(rng: &mut ChaCha8Rng, w_star: &[f64], n: usize) -> Vec<TrainingPair> {
    (0..n)
        .map(|_| {
            let members: Vec<Option<([f64; 4], f64)>> = w_star
                .iter()
                .map(|_| {
                    let b: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                    Some((b, rng.random_range(0.1..1.0)))
                })
                .collect();
            let mut p = TrainingPair::from_members(&members, [0.0; 4]);
            p.target = std::array::from_fn(|k| p.rows.iter().zip(w_star).map(|(r, w)| w * r[k]).sum());
            p
        })
        .collect()
}

/// Closed-form least squares for the linear rule: every pair contributes
/// four equations `sum_j w_j X_jk = g_k`.
pub fn least_squares(pairs: &[TrainingPair]) -> Vec<f64> {
    let d = pairs[0].rows.len();
    let n = pairs.len() * 4;
    let a = DMatrix::from_fn(n, d, |r, j| pairs[r / 4].rows[j][r % 4]);
    let b = DVector::from_fn(n, |r, _| pairs[r / 4].target[r % 4]);
    let svd = a.svd(true, true);
    svd.solve(&b, 1e-12).expect("svd solve").iter().copied().collect()
}

/// Direct evaluation of the fusion formulas for a set of members given as
/// (detector, box, score), with all `weights.len()` detectors zero-filled.
pub fn fuse_ref(members: &[(usize, [f64; 4], f64)], weights: &[f64]) -> ([f64; 4], f64) {
    let mut num = [0.0; 4];
    let mut den = 0.0;
    let mut score_num = 0.0;
    for &(j, b, s) in members {
        for k in 0..4 {
            num[k] += s * weights[j] * b[k];
        }
        den += s * weights[j];
        score_num += weights[j] * s;
    }
    let wsum: f64 = weights.iter().sum();
    (num.map(|n| n / den), score_num / wsum)
}

//! Learning per-detector fusion weights from a small annotated subset.
//!
//! Each ground-truth box becomes one training pair: a `D x 4` matrix whose
//! row `j` is detector `j`'s best-matching box (normalized by image size and
//! scaled by its score), zero when detector `j` missed, and the normalized
//! ground-truth box as target. Weights are fitted by per-sample SGD on the
//! mean squared coordinate error with early stopping on a held-out split.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, Detection};
use crate::ensemble::{combine_rows, CoordinateRule, WeightVector, DENOMINATOR_EPS};
use crate::error::{Error, Result};
use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Row `j`: detector `j`'s normalized box times its score; zero if absent.
    pub rows: Vec<[f64; 4]>,
    /// Raw score of each row's detection; zero if absent.
    pub scores: Vec<f64>,
    pub present: Vec<bool>,
    /// Normalized ground-truth box.
    pub target: [f64; 4],
}

impl TrainingPair {
    pub fn detectors(&self) -> usize {
        self.rows.len()
    }

    /// Builds a pair from optional `(normalized box, score)` entries per detector.
    pub fn from_members(members: &[Option<([f64; 4], f64)>], target: [f64; 4]) -> Self {
        let mut rows = Vec::with_capacity(members.len());
        let mut scores = Vec::with_capacity(members.len());
        let mut present = Vec::with_capacity(members.len());
        for m in members {
            match m {
                Some((b, s)) if *s != 0.0 => {
                    rows.push(b.map(|c| c * s));
                    scores.push(*s);
                    present.push(true);
                }
                _ => {
                    rows.push([0.0; 4]);
                    scores.push(0.0);
                    present.push(false);
                }
            }
        }
        TrainingPair {
            rows,
            scores,
            present,
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub rng_seed: u64,
    pub prediction_rule: CoordinateRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            val_fraction: 0.30,
            patience: 50,
            max_epochs: 20_000,
            rng_seed: 0,
            prediction_rule: CoordinateRule::Normalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_val_mse: f64,
    /// Training-split MSE of the returned weights.
    pub train_mse: f64,
    pub weights: Vec<f64>,
}

fn best_match_order(a: &(f64, &Detection), b: &(f64, &Detection)) -> Ordering {
    // Highest IoU, then highest score, then coordinates: independent of input order.
    b.0.total_cmp(&a.0)
        .then(b.1.score.total_cmp(&a.1.score))
        .then_with(|| {
            a.1.bbox
                .as_array()
                .iter()
                .zip(b.1.bbox.as_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Creates detection/ground-truth pairs for the listed images.
///
/// For each ground-truth box, each detector contributes its same-class box
/// with the highest IoU above `iou_threshold`. Ground truth that no detector
/// matched yields no pair; detections matching no ground truth are ignored.
pub fn build_pairs(
    bundle: &DatasetBundle,
    image_ids: &[String],
    iou_threshold: f64,
) -> Result<Vec<TrainingPair>> {
    let d = bundle.num_detectors();
    let images = bundle.image_map();
    let gt_by_image = bundle.ground_truth_by_image();
    let mut dets_by_image: std::collections::HashMap<&str, Vec<&Detection>> = Default::default();
    for det in &bundle.detections {
        dets_by_image.entry(det.image_id.as_str()).or_default().push(det);
    }

    let mut pairs = Vec::new();
    for id in image_ids {
        let image = images.get(id.as_str()).ok_or_else(|| {
            Error::validation(format!("training image \"{id}\""), "not present in bundle")
        })?;
        let (w, h) = (image.width as f64, image.height as f64);
        let normalize = |b: [f64; 4]| [b[0] / w, b[1] / h, b[2] / w, b[3] / h];
        let dets = dets_by_image.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);

        for gt in gt_by_image.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            let mut best: Vec<Option<(f64, &Detection)>> = vec![None; d];
            for det in dets.iter().filter(|det| det.class_id == gt.class_id) {
                let overlap = iou(&det.bbox, &gt.bbox);
                if overlap <= iou_threshold {
                    continue;
                }
                let slot = &mut best[det.detector_id];
                let better = match slot {
                    None => true,
                    Some(current) => best_match_order(&(overlap, det), current).is_lt(),
                };
                if better {
                    *slot = Some((overlap, det));
                }
            }
            let members: Vec<Option<([f64; 4], f64)>> = best
                .iter()
                .map(|m| m.map(|(_, det)| (normalize(det.bbox.as_array()), det.score)))
                .collect();
            let pair = TrainingPair::from_members(&members, normalize(gt.bbox.as_array()));
            if pair.present.iter().any(|&p| p) {
                pairs.push(pair);
            }
        }
    }
    Ok(pairs)
}

/// Per-sample loss `1/4 * sum_d (g_d - ghat_d)^2`, accumulating its gradient
/// with respect to the weights into `grad` when given.
pub fn sample_loss(
    pair: &TrainingPair,
    weights: &[f64],
    rule: CoordinateRule,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let pred = combine_rows(&pair.rows, &pair.scores, weights, rule)?;
    let resid: [f64; 4] = std::array::from_fn(|k| pred[k] - pair.target[k]);
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / 4.0;

    if let Some(grad) = grad {
        // d loss / d pred_k = resid_k / 2
        match rule {
            CoordinateRule::Linear => {
                for (j, row) in pair.rows.iter().enumerate() {
                    grad[j] += 0.5 * (0..4).map(|k| resid[k] * row[k]).sum::<f64>();
                }
            }
            CoordinateRule::Normalized => {
                // pred_k = N_k / S, d pred_k / d w_j = (X_jk - pred_k s_j) / S
                let denom: f64 = pair.scores.iter().zip(weights).map(|(s, w)| s * w).sum();
                if denom.abs() <= DENOMINATOR_EPS {
                    return Err(Error::Numerical("degenerate normalization".into()));
                }
                for (j, row) in pair.rows.iter().enumerate() {
                    let s = pair.scores[j];
                    let g: f64 = (0..4).map(|k| resid[k] * (row[k] - pred[k] * s)).sum();
                    grad[j] += 0.5 * g / denom;
                }
            }
        }
    }
    Ok(loss)
}

fn check_pairs(pairs: &[TrainingPair], weights: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    if let Some(i) = pairs.iter().position(|p| p.detectors() != weights) {
        return Err(Error::validation(
            format!("pair {i}"),
            format!("{} detector rows for {weights} weights", pairs[i].detectors()),
        ));
    }
    Ok(())
}

/// Mean squared coordinate error over all pairs.
pub fn mse(pairs: &[TrainingPair], weights: &WeightVector, rule: CoordinateRule) -> Result<f64> {
    check_pairs(pairs, weights.len())?;
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        total += sample_loss(p, weights.as_slice(), rule, None)
            .map_err(|e| Error::Numerical(format!("pair {i}: {e}")))?;
    }
    Ok(total / pairs.len() as f64)
}

/// Analytic gradient of [`mse`] with respect to the weights.
pub fn mse_gradient(
    pairs: &[TrainingPair],
    weights: &WeightVector,
    rule: CoordinateRule,
) -> Result<Vec<f64>> {
    check_pairs(pairs, weights.len())?;
    let mut grad = vec![0.0; weights.len()];
    for (i, p) in pairs.iter().enumerate() {
        sample_loss(p, weights.as_slice(), rule, Some(&mut grad))
            .map_err(|e| Error::Numerical(format!("pair {i}: {e}")))?;
    }
    let n = pairs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Starting point: zeros for the linear rule; uniform `1/D` for the
/// normalized rule, whose prediction is undefined at zero.
pub fn initial_weights(detectors: usize, rule: CoordinateRule) -> WeightVector {
    match rule {
        CoordinateRule::Linear => WeightVector::uniform(detectors, 0.0),
        CoordinateRule::Normalized => WeightVector::uniform(detectors, 1.0 / detectors as f64),
    }
}

/// Splits `n` items into (train, validation) index lists with a seeded shuffle.
pub fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

fn divergence(epoch: usize, lr: f64) -> Error {
    Error::Numerical(format!(
        "training diverged at epoch {epoch} (non-finite loss); try a learning rate below {lr:e}"
    ))
}

/// Fits fusion weights by per-sample SGD with early stopping, returning the
/// weights of the best validation epoch.
pub fn train_weights(
    pairs: &[TrainingPair],
    config: &TrainConfig,
) -> Result<(WeightVector, TrainReport)> {
    config.validate()?;
    let d = pairs.first().map(TrainingPair::detectors).unwrap_or(0);
    if d == 0 {
        return Err(Error::Config("no training pairs".into()));
    }
    check_pairs(pairs, d)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (train_idx, val_idx) = split_indices(pairs.len(), config.val_fraction, &mut rng);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "{} pairs cannot be split into non-empty train and validation sets",
            pairs.len()
        )));
    }
    let train: Vec<TrainingPair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let val: Vec<TrainingPair> = val_idx.iter().map(|&i| pairs[i].clone()).collect();
    let rule = config.prediction_rule;

    let mut w = initial_weights(d, rule);
    let mut best_w = w.clone();
    let mut best_val = mse(&val, &w, rule)?;
    let mut stale = 0;
    let mut epochs = 0;
    let mut grad = vec![0.0; d];
    let mut order: Vec<usize> = (0..train.len()).collect();

    while epochs < config.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for &i in &order {
            grad.iter_mut().for_each(|g| *g = 0.0);
            sample_loss(&train[i], w.as_slice(), rule, Some(&mut grad))
                .map_err(|_| divergence(epochs, config.learning_rate))?;
            for (wj, gj) in w.0.iter_mut().zip(&grad) {
                *wj -= config.learning_rate * gj;
            }
        }
        if !w.0.iter().all(|v| v.is_finite()) {
            return Err(divergence(epochs, config.learning_rate));
        }
        let val_mse = mse(&val, &w, rule).map_err(|_| divergence(epochs, config.learning_rate))?;
        if !val_mse.is_finite() {
            return Err(divergence(epochs, config.learning_rate));
        }
        if val_mse < best_val {
            best_val = val_mse;
            best_w = w.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let train_mse = mse(&train, &best_w, rule)?;
    let report = TrainReport {
        epochs,
        best_val_mse: best_val,
        train_mse,
        weights: best_w.0.clone(),
    };
    Ok((best_w, report))
}

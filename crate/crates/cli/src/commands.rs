use std::collections::HashSet;
use std::path::{Path, PathBuf};

use detfuse::evaluation::{cv_image, cv_video, render_table, CvReport};
use detfuse::json::{write_atomic, write_precise_json};
use detfuse::synthetic::{load_profiles, random_scenes, reference_profiles, video_world, SceneConfig, VideoConfig};
use detfuse::{
    build_pairs, ensemble_fuse_bundle, evaluate, generate, load_bundle, nms_fuse_bundle, refine_bundle, save_bundle,
    train_weights, DatasetBundle, Error, Result, WeightsFile,
};
use log::info;

use crate::config::{check_paths, RunConfig};
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    config.apply_seed(seed);
    if let Some(n) = cli.threads.or(config.threads) {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let inputs: Vec<&Path> = cli.config.as_deref().into_iter().collect();

    match cli.command {
        Command::FuseNms(a) => {
            check_paths(&[&inputs[..], &[&a.input]].concat(), &[&a.out])?;
            if let Some(t) = a.iou_threshold {
                config.nms.iou_threshold = t;
            }
            let bundle = load_bundle(&a.input)?;
            let fused = nms_fuse_bundle(&bundle, &config.nms)?;
            info!("nms kept {} of {} detections", fused.detections.len(), bundle.detections.len());
            save_bundle(&fused, &a.out)
        }
        Command::Train(a) => {
            let report_out = a.report_out.clone().unwrap_or_else(|| with_suffix(&a.weights_out, ".report.json"));
            check_paths(
                &[&inputs[..], &[&a.input, &a.train_ids]].concat(),
                &[&a.weights_out, &report_out],
            )?;
            if let Some(r) = a.rule {
                config.train.prediction_rule = r.into();
            }
            if let Some(lr) = a.learning_rate {
                config.train.learning_rate = lr;
            }
            if let Some(m) = a.max_epochs {
                config.train.max_epochs = m;
            }
            if let Some(t) = a.iou_threshold {
                config.fusion.iou_threshold = t;
            }
            let bundle = load_bundle(&a.input)?;
            let ids = read_id_list(&a.train_ids)?;
            let pairs = build_pairs(&bundle, &ids, config.fusion.iou_threshold)?;
            let (weights, report) = train_weights(&pairs, &config.train)?;
            info!(
                "trained on {} pairs for {} epochs, validation mse {:.6e}",
                pairs.len(),
                report.epochs,
                report.best_val_mse
            );
            let file = WeightsFile {
                detector_names: bundle.detector_names.clone(),
                weights,
                coordinate_rule: config.train.prediction_rule,
            };
            file.save(&a.weights_out)?;
            write_precise_json(&report_out, &report)
        }
        Command::Fuse(a) => {
            check_paths(&[&inputs[..], &[&a.input, &a.weights]].concat(), &[&a.out])?;
            if let Some(t) = a.iou_threshold {
                config.fusion.iou_threshold = t;
            }
            if let Some(m) = a.min_sources {
                config.fusion.min_sources = m;
            }
            let bundle = load_bundle(&a.input)?;
            let weights = WeightsFile::load(&a.weights)?;
            weights.check_detectors(&bundle.detector_names)?;
            config.fusion.coordinate_rule = weights.coordinate_rule;
            let fused = ensemble_fuse_bundle(&bundle, &weights.weights, &config.fusion)?;
            info!("fused {} detections into {}", bundle.detections.len(), fused.detections.len());
            save_bundle(&fused, &a.out)
        }
        Command::Refine(a) => {
            check_paths(&[&inputs[..], &[&a.input]].concat(), &[&a.out])?;
            if let Some(m) = a.min_track_length {
                config.refine.min_track_length = m;
            }
            let bundle = load_bundle(&a.input)?;
            let refined = refine_bundle(&bundle, &config.refine)?;
            let recovered = refined.detections.iter().filter(|d| d.recovered).count();
            info!(
                "refined {} detections into {} ({recovered} recovered)",
                bundle.detections.len(),
                refined.detections.len()
            );
            save_bundle(&refined, &a.out)
        }
        Command::Eval(a) => {
            let table = a.table.clone().unwrap_or_else(|| a.report.with_extension("txt"));
            check_paths(&[&inputs[..], &[&a.input, &a.gt]].concat(), &[&a.report, &table])?;
            let dets = load_bundle(&a.input)?;
            let gt = load_bundle(&a.gt)?;
            let images: HashSet<&str> = dets.images.iter().map(|im| im.image_id.as_str()).collect();
            if let Some(im) = dets.images.iter().find(|im| gt.image(&im.image_id).is_none()) {
                return Err(Error::Validation {
                    record: format!("image \"{}\"", im.image_id),
                    message: "missing from the ground-truth bundle".into(),
                });
            }
            let truth: Vec<_> = gt
                .ground_truth
                .iter()
                .filter(|g| images.contains(g.image_id.as_str()))
                .cloned()
                .collect();
            let report = evaluate(&dets.detections, &truth, &gt.class_names, &config.eval)?;
            let label = a
                .input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "detections".into());
            let text = render_table(&[(label, &report)], &gt.class_names);
            write_precise_json(&a.report, &report)?;
            write_atomic(&table, text.as_bytes())
        }
        Command::CvImage(a) => {
            let table = a.table.clone().unwrap_or_else(|| a.report.with_extension("txt"));
            check_paths(&[&inputs[..], &[&a.input]].concat(), &[&a.report, &table])?;
            if let Some(f) = a.folds {
                config.cv_image.folds = f;
            }
            if let Some(n) = a.train_size {
                config.cv_image.train_size = n;
            }
            if let Some(r) = a.rule {
                config.fusion.coordinate_rule = r.into();
                config.train.prediction_rule = r.into();
            }
            let bundle = load_bundle(&a.input)?;
            let report = cv_image(&bundle, &config.cv_image, &config.pipeline())?;
            write_cv(&report, &bundle, &a.report, &table)
        }
        Command::CvVideo(a) => {
            let table = a.table.clone().unwrap_or_else(|| a.report.with_extension("txt"));
            check_paths(&[&inputs[..], &[&a.input]].concat(), &[&a.report, &table])?;
            if let Some(s) = a.segments {
                config.cv_video.segments = s;
            }
            if let Some(n) = a.train_tail {
                config.cv_video.train_tail = n;
            }
            if let Some(r) = a.rule {
                config.fusion.coordinate_rule = r.into();
                config.train.prediction_rule = r.into();
            }
            let bundle = load_bundle(&a.input)?;
            let report = cv_video(&bundle, &config.cv_video, &config.pipeline())?;
            write_cv(&report, &bundle, &a.report, &table)
        }
        Command::Synth(a) => {
            let mut ins = vec![a.gt.as_path()];
            ins.extend(a.profiles.as_deref());
            ins.extend(inputs.iter().copied());
            check_paths(&ins, &[&a.out])?;
            let gt = load_bundle(&a.gt)?;
            let profiles = match &a.profiles {
                Some(p) => load_profiles(p)?,
                None => reference_profiles(),
            };
            let bundle = generate(&gt, &profiles, seed)?;
            info!(
                "{} detectors produced {} detections on {} images",
                profiles.len(),
                bundle.detections.len(),
                bundle.images.len()
            );
            save_bundle(&bundle, &a.out)
        }
        Command::Scenes(a) => {
            check_paths(&inputs, &[&a.out])?;
            let bundle = match a.video_frames {
                Some(frames) => video_world(&VideoConfig { frames, ..VideoConfig::default() }, seed).truth,
                None => random_scenes(&SceneConfig { images: a.images, ..SceneConfig::default() }, seed),
            };
            save_bundle(&bundle, &a.out)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// One image id per line; blank lines and surrounding whitespace are ignored.
fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Validation {
            record: path.display().to_string(),
            message: "no training image ids".into(),
        });
    }
    Ok(ids)
}

fn write_cv(report: &CvReport, bundle: &DatasetBundle, report_path: &Path, table_path: &Path) -> Result<()> {
    let means = report.mean_reports();
    let rows: Vec<(String, &_)> = means.iter().map(|(m, r)| (m.clone(), r)).collect();
    let text = render_table(&rows, &bundle.class_names);
    for (method, r) in &means {
        let maps: Vec<String> = r.thresholds.iter().map(|t| format!("{:.4}", t.map)).collect();
        info!("{method}: MAP {}", maps.join(" / "));
    }
    write_precise_json(report_path, report)?;
    write_atomic(table_path, text.as_bytes())
}

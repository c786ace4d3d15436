//! Ensembling of object detector outputs.
//!
//! Detector outputs for a dataset live in a [`DatasetBundle`]. They can be
//! fused per image by class-wise NMS ([`nms`]) or by clustering and learned
//! weighted averaging ([`ensemble`], with weights from [`training`]); video
//! output can be refined with tracking ([`refine`]). [`evaluation`] computes
//! VOC-style MAP and runs the cross-validation harnesses, and [`synthetic`]
//! produces seeded virtual detectors for experiments without real models.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod json;
pub mod nms;
pub mod refine;
pub mod synthetic;
pub mod training;

pub use dataset::{
    from_xywh, load_bundle, save_bundle, DatasetBundle, Detection, GroundTruthBox, ImageRecord,
};
pub use ensemble::{
    build_clusters, ensemble_fuse, ensemble_fuse_bundle, fuse_cluster, Cluster, CoordinateRule,
    FusionConfig, WeightVector, WeightsFile,
};
pub use error::{Error, Result};
pub use evaluation::{average_precision, evaluate, EvalConfig, EvalReport, PipelineConfig};
pub use geometry::{area, iou, BoundingBox};
pub use nms::{nms_fuse, nms_fuse_bundle, NmsConfig};
pub use refine::{
    default_box_tracker, refine_bundle, stage1_fill_gaps, stage2_prune_short_tracks, BoxTracker,
    ConstantVelocityTracker, Frame, RefineConfig,
};
pub use synthetic::{generate, DetectorProfile};
pub use training::{build_pairs, mse, train_weights, TrainConfig, TrainReport, TrainingPair};

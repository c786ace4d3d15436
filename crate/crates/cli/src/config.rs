use std::path::{Path, PathBuf};

use detfuse::evaluation::{CvImageConfig, CvVideoConfig};
use detfuse::json::read_json;
use detfuse::{EvalConfig, Error, FusionConfig, NmsConfig, PipelineConfig, RefineConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Contents of the optional `--config` file. Every section is optional;
/// command-line flags override whatever is set here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nms: NmsConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub cv_image: CvImageConfig,
    pub cv_video: CvVideoConfig,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Routes the single seed into every randomized stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.rng_seed = seed;
        self.cv_image.seed = seed;
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            nms: self.nms,
            fusion: self.fusion,
            train: self.train.clone(),
            refine: self.refine.clone(),
            eval: self.eval.clone(),
        }
    }
}

fn normalized(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Rejects commands whose outputs would overwrite one of their inputs or
/// each other.
pub fn check_paths(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for (i, out) in outputs.iter().enumerate() {
        let o = normalized(out);
        if let Some(inp) = inputs.iter().find(|p| normalized(p) == o) {
            return Err(Error::Config(format!(
                "output path {} is also an input",
                inp.display()
            )));
        }
        if outputs[..i].iter().any(|p| normalized(p) == o) {
            return Err(Error::Config(format!("output path {} given twice", out.display())));
        }
    }
    Ok(())
}

//! Seeded workloads shared by the criterion benches.

use detfuse::synthetic::{generate, random_scenes, reference_profiles, SceneConfig};
use detfuse::DatasetBundle;

/// Image dataset with three virtual detectors.
pub fn image_bundle(images: usize, seed: u64) -> DatasetBundle {
    let gt = random_scenes(&SceneConfig { images, ..SceneConfig::default() }, seed);
    generate(&gt, &reference_profiles(), seed).expect("valid profiles")
}

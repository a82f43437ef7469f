//! Optional TOML config file. Every key is optional; flags given on the
//! command line win over the file, and the file wins over built-in defaults.
//!
//! ```toml
//! [generate]
//! count = 500
//! seed = 7
//! bodies = 20
//! spacing = 0.002
//! workspace_min = [-0.06, -0.06, -0.06]
//! workspace_max = [0.06, 0.06, 0.06]
//! length_range = [0.04, 0.10]
//! max_curvature = 60.0
//! stroke_radius_px = 1.5
//! frustum_margin_px = 3.0
//!
//! [reconstruct]
//! bodies = 20
//! smoothing = 0.0
//!
//! [train]
//! view = "top"
//! target = "triangulated"
//! epochs = 50
//! alpha = 1.0
//! beta = 0.1
//! lr = 1e-3
//! seed = 0
//! batch_size = 32
//! dropout = 0.5
//! validation_fraction = 0.1
//!
//! [eval]
//! view = "top"
//! correspondence = 20
//! ```

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub generate: GenerateFile,
    #[serde(default)]
    pub reconstruct: ReconstructFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub eval: EvalFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub bodies: Option<usize>,
    pub spacing: Option<f64>,
    pub workspace_min: Option<[f64; 3]>,
    pub workspace_max: Option<[f64; 3]>,
    pub length_range: Option<[f64; 2]>,
    pub max_curvature: Option<f64>,
    pub stroke_radius_px: Option<f64>,
    pub frustum_margin_px: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructFile {
    pub bodies: Option<usize>,
    pub smoothing: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub view: Option<String>,
    pub target: Option<String>,
    pub epochs: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub dropout: Option<f64>,
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub view: Option<String>,
    pub correspondence: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("config: {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("config: {}", path.display()))
    }
}

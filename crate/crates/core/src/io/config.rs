//! TOML run configuration.
//!
//! ```toml
//! dataset = "data/train.bin"
//! output_dir = "runs/fall_spin"
//! determinism = true
//!
//! [scene]
//! preset = "fall_spin"
//!
//! [train]
//! iterations = 2000
//! [train.network]
//! bottleneck = 16
//!
//! [segment]
//! lambda = 0.5
//! groups = 8
//! ```
//!
//! Unknown keys are errors. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{preset, ObjectSpec, SceneConfig, PRESET_FRAMES, PRESET_HORIZON};
use crate::segmentation::SegmentConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// Built-in scene name; mutually exclusive with `objects`.
    pub preset: Option<String>,
    /// Particles per object for presets.
    pub particles: usize,
    pub objects: Vec<ObjectSpec>,
    pub frames: usize,
    pub horizon: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            preset: None,
            particles: 100,
            objects: Vec::new(),
            frames: PRESET_FRAMES,
            horizon: PRESET_HORIZON,
            noise_sigma: 0.0,
            seed: 0,
            train_fraction: 0.75,
        }
    }
}

impl SceneSection {
    pub fn scene(&self) -> Result<SceneConfig> {
        let scene = match (&self.preset, self.objects.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config("scene: give either a preset or objects, not both".into()));
            }
            (Some(name), true) => {
                let mut s = preset(name, self.particles, self.seed)?;
                s.frames = self.frames;
                s.horizon = self.horizon;
                s.noise_sigma = self.noise_sigma;
                s
            }
            (None, _) => SceneConfig {
                name: "custom".into(),
                objects: self.objects.clone(),
                frames: self.frames,
                horizon: self.horizon,
                noise_sigma: self.noise_sigma,
                seed: self.seed,
            },
        };
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Last predicted time.
    pub horizon: f64,
    /// Predicted frames after the training span.
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizon: PRESET_HORIZON,
            steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Training dataset file.
    pub dataset: Option<PathBuf>,
    /// Held-out extrapolation dataset file.
    pub extrapolation: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Reports omit wall-clock time so reruns are byte-identical.
    pub determinism: bool,
    pub scene: SceneSection,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            extrapolation: None,
            output_dir: PathBuf::from("run"),
            determinism: true,
            scene: SceneSection::default(),
            train: TrainConfig::default(),
            segment: SegmentConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.train.validate()?;
        Ok(c)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        c.resolve_paths(&base);
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.dataset {
            fix(p);
        }
        if let Some(p) = &mut self.extrapolation {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

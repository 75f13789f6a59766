//! Run configuration: one JSON document with a section per subsystem.
//!
//! Every field has a default, so a config file only lists overrides. Unknown
//! fields are rejected to catch typos early.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; every random decision in a run derives from it.
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub map: MapConfig,
    pub losses: LossConfig,
    pub optim: OptimConfig,
    pub slam: SlamConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            geometry: GeometryConfig::default(),
            map: MapConfig::default(),
            losses: LossConfig::default(),
            optim: OptimConfig::default(),
            slam: SlamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Virtual cameras averaged across each exposure window.
    pub n_cam: usize,
    /// Fraction of the last inter-frame motion used to initialize a new
    /// window's start-to-end spread.
    pub init_separation: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_cam: 5,
            init_separation: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapBackend {
    Voxel,
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub backend: MapBackend,
    /// Voxel nodes per axis.
    pub resolution: [usize; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    /// Ray-marching samples per ray (voxel backend).
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Raw density the voxel grid starts from (a faint uniform fog that lets
    /// gradients reach unseeded space).
    pub init_density_raw: f64,
    /// Log radiance the voxel grid starts from.
    pub init_log_color: f64,
    /// Raw density written when depth seeding claims a voxel node.
    pub seed_density_raw: f64,
    /// Seed every `seed_stride`-th pixel in x and y.
    pub seed_stride: usize,
    /// Rendered opacity above which a pixel counts as already covered.
    pub seed_opacity_threshold: f64,
    /// Opacity logit of seeded Gaussians.
    pub seed_opacity_logit: f64,
    /// Gaussian seed scale = factor * stride * depth / fx.
    pub seed_scale_factor: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            backend: MapBackend::Voxel,
            resolution: [48, 48, 48],
            bounds_min: [-3.2, -3.2, -3.2],
            bounds_max: [3.2, 3.2, 3.2],
            n_samples: 32,
            near: 0.05,
            far: 8.0,
            init_density_raw: -4.0,
            init_log_color: -1.2,
            seed_density_raw: 6.0,
            seed_stride: 4,
            seed_opacity_threshold: 0.5,
            seed_opacity_logit: 2.0,
            seed_scale_factor: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_image: f64,
    pub lambda_depth: f64,
    pub lambda_traj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_image: 1.0,
            lambda_depth: 1.0,
            lambda_traj: 1e4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub tracking_iters: usize,
    pub mapping_iters: usize,
    /// Learning rate for the tracked window's center pose and translational
    /// velocity; the rotational velocity uses `lr_tracking * rot_vel_scale`.
    pub lr_tracking: f64,
    pub rot_vel_scale: f64,
    /// Learning rate for map parameters during mapping.
    pub lr_map: f64,
    /// Learning rate for exposure, white balance, and the response curve.
    pub lr_tone: f64,
    /// Learning rate for the trajectory interpolation rate `a` (log space).
    pub lr_log_a: f64,
    /// Pixels sampled per tracking iteration.
    pub pixels_tracking: usize,
    /// Pixels sampled per frame per mapping iteration.
    pub pixels_mapping: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            tracking_iters: 200,
            mapping_iters: 30,
            lr_tracking: 5e-5,
            rot_vel_scale: 0.1,
            lr_map: 2e-2,
            lr_tone: 1e-2,
            lr_log_a: 1e-3,
            pixels_tracking: 512,
            pixels_mapping: 2048,
        }
    }
}

/// Model component dropped for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblateMode {
    /// No trajectory smoothness term.
    Traj,
    /// Frozen identity tone stage.
    Tonemap,
    /// One virtual camera and frozen velocities (no motion blur model).
    Blur,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlamConfig {
    /// Drop one model component; `None` runs the full method.
    pub ablate: Option<AblateMode>,
    /// Run a mapping phase every this many frames.
    pub mapping_every: usize,
    /// Most recent keyframes included in each mapping phase.
    pub keyframes_recent: usize,
    /// Additional random earlier keyframes per mapping phase.
    pub keyframes_random_past: usize,
    /// Revert a tracked frame whose final loss exceeds this multiple of its
    /// initial loss.
    pub divergence_factor: f64,
    /// Also refine keyframe exposure windows during mapping.
    pub refine_keyframe_windows: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            ablate: None,
            mapping_every: 5,
            keyframes_recent: 3,
            keyframes_random_past: 1,
            divergence_factor: 10.0,
            refine_keyframe_windows: true,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Config = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config always serializes");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.geometry.n_cam < 1 {
            return bad("geometry.n_cam must be at least 1".into());
        }
        if !(self.geometry.init_separation > 0.0 && self.geometry.init_separation <= 1.0) {
            return bad("geometry.init_separation must be in (0, 1]".into());
        }
        if self.map.resolution.iter().any(|&r| r < 2) {
            return bad("map.resolution needs at least 2 nodes per axis".into());
        }
        for a in 0..3 {
            if !(self.map.bounds_max[a] > self.map.bounds_min[a]) {
                return bad(format!("map.bounds axis {a} is empty"));
            }
        }
        if !(self.map.far > self.map.near && self.map.near > 0.0) {
            return bad("map must satisfy 0 < near < far".into());
        }
        if self.map.n_samples == 0 {
            return bad("map.n_samples must be positive".into());
        }
        if self.map.seed_stride == 0 {
            return bad("map.seed_stride must be positive".into());
        }
        for (name, v) in [
            ("optim.lr_tracking", self.optim.lr_tracking),
            ("optim.lr_map", self.optim.lr_map),
            ("optim.lr_tone", self.optim.lr_tone),
            ("optim.lr_log_a", self.optim.lr_log_a),
            ("optim.rot_vel_scale", self.optim.rot_vel_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("losses.lambda_image", self.losses.lambda_image),
            ("losses.lambda_depth", self.losses.lambda_depth),
            ("losses.lambda_traj", self.losses.lambda_traj),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.slam.mapping_every == 0 {
            return bad("slam.mapping_every must be positive".into());
        }
        if !(self.slam.divergence_factor > 1.0) {
            return bad("slam.divergence_factor must exceed 1".into());
        }
        if self.optim.pixels_tracking == 0 || self.optim.pixels_mapping == 0 {
            return bad("optim pixel budgets must be positive".into());
        }
        Ok(())
    }
}

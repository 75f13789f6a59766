//! On-disk sequence layout.
//!
//! A dataset directory holds:
//! - `rgb/%06d.png` — the degraded (blurred, exposed) 8-bit observations,
//! - `depth/%06d.png` — 16-bit depth in millimeters, 0 = invalid,
//! - `meta.json` — camera, timing, and per-frame exposure metadata,
//! - `groundtruth.txt` — reference trajectory (optional at load time),
//! - `rgb_sharp/%06d.png`, `hdr_sharp/%06d.pfm` — sharp references the
//!   generator also emits (optional; only evaluation needs them).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{read_trajectory, CameraIntrinsics, GeometryError, TrajectoryPoint};
use crate::img::{read_depth_png, read_ldr_png, DepthImage, ImgError, LdrImage};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image in dataset: {0}")]
    Img(#[from] ImgError),
    #[error("trajectory in dataset: {0}")]
    Trajectory(#[from] GeometryError),
    #[error("meta.json at {path}: {msg}")]
    Meta { path: PathBuf, msg: String },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

/// Per-frame exposure record. `dt` (seconds) is the physical exposure time
/// `sv / fps`, which scales brightness and spans the blur window; `ev` is the
/// auto-exposure value the shutter schedule was derived from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMeta {
    pub ev: f64,
    pub sv: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub fps: f64,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
    /// Luma weights used for the auto-exposure median (Rec. 601).
    pub gray_weights: [f64; 3],
    /// Shutter schedule `sv = sv_gain * 2^ev + sv_bias`.
    pub sv_gain: f64,
    pub sv_bias: f64,
    pub frames: Vec<FrameMeta>,
}

impl DatasetMeta {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 / self.fps
    }
}

fn frame_file(dir: &Path, sub: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{index:06}.{ext}"))
}

pub fn rgb_path(dir: &Path, index: usize) -> PathBuf {
    frame_file(dir, "rgb", index, "png")
}

pub fn rgb_sharp_path(dir: &Path, index: usize) -> PathBuf {
    frame_file(dir, "rgb_sharp", index, "png")
}

pub fn hdr_sharp_path(dir: &Path, index: usize) -> PathBuf {
    frame_file(dir, "hdr_sharp", index, "pfm")
}

pub fn depth_path(dir: &Path, index: usize) -> PathBuf {
    frame_file(dir, "depth", index, "png")
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta.json")
}

pub fn groundtruth_path(dir: &Path) -> PathBuf {
    dir.join("groundtruth.txt")
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta, DatasetError> {
    let path = meta_path(dir);
    let text = std::fs::read_to_string(&path)
        .map_err(|source| DatasetError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Meta { path, msg: e.to_string() })
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<(), DatasetError> {
    let path = meta_path(dir);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&path, text).map_err(|source| DatasetError::Io { path, source })
}

/// A fully loaded input sequence. Degraded RGB and depth are required;
/// ground truth and sharp references stay on disk until asked for.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub ldr: Vec<LdrImage>,
    pub depth: Vec<DepthImage>,
    pub gt_trajectory: Option<Vec<TrajectoryPoint>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let meta = read_meta(dir)?;
        let n = meta.n_frames();
        if n == 0 {
            return Err(DatasetError::Inconsistent("meta.json lists no frames".into()));
        }
        let (w, h) = (meta.intrinsics.width, meta.intrinsics.height);
        let mut ldr = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for i in 0..n {
            let im = read_ldr_png(&rgb_path(dir, i))?;
            if im.width != w || im.height != h {
                return Err(DatasetError::Inconsistent(format!(
                    "frame {i}: rgb is {}x{}, intrinsics say {w}x{h}",
                    im.width, im.height
                )));
            }
            let d = read_depth_png(&depth_path(dir, i))?;
            if d.width != w || d.height != h {
                return Err(DatasetError::Inconsistent(format!(
                    "frame {i}: depth is {}x{}, intrinsics say {w}x{h}",
                    d.width, d.height
                )));
            }
            ldr.push(im);
            depth.push(d);
        }
        let gt_path = groundtruth_path(dir);
        let gt_trajectory = if gt_path.exists() {
            let traj = read_trajectory(&gt_path)?;
            if traj.len() != n {
                return Err(DatasetError::Inconsistent(format!(
                    "groundtruth.txt has {} poses for {n} frames",
                    traj.len()
                )));
            }
            Some(traj)
        } else {
            None
        };
        Ok(Dataset { dir: dir.to_path_buf(), meta, ldr, depth, gt_trajectory })
    }

    pub fn n_frames(&self) -> usize {
        self.meta.n_frames()
    }

    /// Sharp tone-mapped reference for one frame, if the dataset carries it.
    pub fn load_sharp_ldr(&self, index: usize) -> Option<LdrImage> {
        let p = rgb_sharp_path(&self.dir, index);
        p.exists().then(|| read_ldr_png(&p)).transpose().ok().flatten()
    }

    /// Sharp HDR reference for one frame, if the dataset carries it.
    pub fn load_sharp_hdr(&self, index: usize) -> Option<crate::img::HdrImage> {
        let p = hdr_sharp_path(&self.dir, index);
        p.exists().then(|| crate::img::read_pfm(&p)).transpose().ok().flatten()
    }
}

/// Creates the directory skeleton the generator writes into.
pub fn create_layout(dir: &Path) -> Result<(), DatasetError> {
    for sub in ["rgb", "rgb_sharp", "hdr_sharp", "depth"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p)
            .map_err(|source| DatasetError::Io { path: p.clone(), source })?;
    }
    Ok(())
}

//! Binary map checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "RMAP"
//! version u32      currently 1
//! backend u8       0 = voxel, 1 = gaussian
//! ... backend fields and parameter arrays (length-prefixed f64 arrays)
//! extras  u64 count, then per entry: name (u64 len + utf8), f64 array
//! ```
//!
//! The extras section carries named auxiliary arrays (for example optimizer
//! moments) so a run can resume bit-exactly. Floats round-trip bit-exactly;
//! readers reject unknown magic, versions, and backend tags.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use super::{gaussian::GaussianMap, voxel::VoxelMap, RadianceMap};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RMAP";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// Named auxiliary arrays stored alongside the map parameters.
pub type ExtraArrays = BTreeMap<String, Vec<f64>>;

pub fn write_checkpoint(
    path: &Path,
    map: &RadianceMap,
    extras: &ExtraArrays,
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        match map {
            RadianceMap::Voxel(v) => {
                w.write_u8(0)?;
                w.write_u64::<LittleEndian>(v.nx as u64)?;
                w.write_u64::<LittleEndian>(v.ny as u64)?;
                w.write_u64::<LittleEndian>(v.nz as u64)?;
                for a in 0..3 {
                    w.write_f64::<LittleEndian>(v.bounds_min[a])?;
                }
                for a in 0..3 {
                    w.write_f64::<LittleEndian>(v.bounds_max[a])?;
                }
                w.write_u64::<LittleEndian>(v.n_samples as u64)?;
                w.write_f64::<LittleEndian>(v.near)?;
                w.write_f64::<LittleEndian>(v.far)?;
                w.write_f64::<LittleEndian>(v.seed_density_raw)?;
                write_array(&mut w, &v.density_raw)?;
                write_array(&mut w, &v.color_raw)?;
            }
            RadianceMap::Gaussian(g) => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(g.seed_opacity_logit)?;
                w.write_f64::<LittleEndian>(g.seed_scale_factor)?;
                write_array(&mut w, &g.centers)?;
                write_array(&mut w, &g.log_scales)?;
                write_array(&mut w, &g.opacity_logits)?;
                write_array(&mut w, &g.log_colors)?;
            }
        }
        w.write_u64::<LittleEndian>(extras.len() as u64)?;
        for (name, data) in extras {
            let bytes = name.as_bytes();
            w.write_u64::<LittleEndian>(bytes.len() as u64)?;
            w.write_all(bytes)?;
            write_array(&mut w, data)?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

pub fn read_checkpoint(path: &Path) -> Result<(RadianceMap, ExtraArrays), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fmt_err = |msg: String| CheckpointError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let inner = |r: &mut BufReader<File>| -> Result<(RadianceMap, ExtraArrays), String> {
        let e = |e: std::io::Error| format!("truncated or unreadable: {e}");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(e)?;
        if &magic != MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(e)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            ));
        }
        let backend = r.read_u8().map_err(e)?;
        let map = match backend {
            0 => {
                let nx = r.read_u64::<LittleEndian>().map_err(e)? as usize;
                let ny = r.read_u64::<LittleEndian>().map_err(e)? as usize;
                let nz = r.read_u64::<LittleEndian>().map_err(e)? as usize;
                let mut bmin = Vector3::zeros();
                let mut bmax = Vector3::zeros();
                for a in 0..3 {
                    bmin[a] = r.read_f64::<LittleEndian>().map_err(e)?;
                }
                for a in 0..3 {
                    bmax[a] = r.read_f64::<LittleEndian>().map_err(e)?;
                }
                let n_samples = r.read_u64::<LittleEndian>().map_err(e)? as usize;
                let near = r.read_f64::<LittleEndian>().map_err(e)?;
                let far = r.read_f64::<LittleEndian>().map_err(e)?;
                let seed_density_raw = r.read_f64::<LittleEndian>().map_err(e)?;
                let density_raw = read_array(r).map_err(e)?;
                let color_raw = read_array(r).map_err(e)?;
                let n = nx
                    .checked_mul(ny)
                    .and_then(|p| p.checked_mul(nz))
                    .ok_or("voxel resolution overflow".to_string())?;
                if density_raw.len() != n || color_raw.len() != 3 * n {
                    return Err(format!(
                        "voxel array sizes {} / {} do not match resolution {}x{}x{}",
                        density_raw.len(),
                        color_raw.len(),
                        nx,
                        ny,
                        nz
                    ));
                }
                RadianceMap::Voxel(VoxelMap {
                    nx,
                    ny,
                    nz,
                    bounds_min: bmin,
                    bounds_max: bmax,
                    density_raw,
                    color_raw,
                    n_samples,
                    near,
                    far,
                    seed_density_raw,
                })
            }
            1 => {
                let seed_opacity_logit = r.read_f64::<LittleEndian>().map_err(e)?;
                let seed_scale_factor = r.read_f64::<LittleEndian>().map_err(e)?;
                let centers = read_array(r).map_err(e)?;
                let log_scales = read_array(r).map_err(e)?;
                let opacity_logits = read_array(r).map_err(e)?;
                let log_colors = read_array(r).map_err(e)?;
                let n = log_scales.len();
                if centers.len() != 3 * n || opacity_logits.len() != n || log_colors.len() != 3 * n
                {
                    return Err("gaussian array sizes disagree".to_string());
                }
                RadianceMap::Gaussian(GaussianMap {
                    centers,
                    log_scales,
                    opacity_logits,
                    log_colors,
                    seed_opacity_logit,
                    seed_scale_factor,
                })
            }
            other => return Err(format!("unknown backend tag {other}")),
        };
        let n_extra = r.read_u64::<LittleEndian>().map_err(e)?;
        let mut extras = ExtraArrays::new();
        for _ in 0..n_extra {
            let name_len = r.read_u64::<LittleEndian>().map_err(e)? as usize;
            if name_len > 1 << 20 {
                return Err(format!("implausible extra name length {name_len}"));
            }
            let mut buf = vec![0u8; name_len];
            r.read_exact(&mut buf).map_err(e)?;
            let name = String::from_utf8(buf).map_err(|_| "extra name is not utf-8".to_string())?;
            let data = read_array(r).map_err(e)?;
            extras.insert(name, data);
        }
        Ok((map, extras))
    };
    inner(&mut r).map_err(fmt_err)
}

fn write_array<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    for &x in data {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R) -> std::io::Result<Vec<f64>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 32 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("implausible array length {len}"),
        ));
    }
    let mut data = vec![0.0f64; len];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Ok(data)
}

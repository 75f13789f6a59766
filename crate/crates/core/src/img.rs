//! Image containers and file formats.
//!
//! All in-memory pixel data is `f64`, row-major, top-left origin. On disk:
//!
//! * LDR color — 8-bit RGB PNG; values in `[0, 1]` scaled by 255 and rounded
//!   half-to-even.
//! * HDR color — PFM (`PF`, little-endian `scale = -1.0`, rows stored
//!   bottom-up per the format).
//! * Depth — 16-bit grayscale PNG in millimeters, 0 = invalid.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("image dimensions {w}x{h} do not match expected {ew}x{eh}")]
    DimensionMismatch { w: usize, h: usize, ew: usize, eh: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> ImgError {
    ImgError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> ImgError {
    ImgError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Linear-radiance RGB image (unbounded non-negative values).
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Display-referred RGB image, nominally in `[0, 1]` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Z-depth in meters; `0.0` marks invalid measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

macro_rules! rgb_image_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn new(width: usize, height: usize) -> Self {
                $ty {
                    width,
                    height,
                    data: vec![[0.0; 3]; width * height],
                }
            }

            #[inline]
            pub fn at(&self, ix: usize, iy: usize) -> [f64; 3] {
                self.data[iy * self.width + ix]
            }

            #[inline]
            pub fn at_mut(&mut self, ix: usize, iy: usize) -> &mut [f64; 3] {
                &mut self.data[iy * self.width + ix]
            }

            pub fn n_pixels(&self) -> usize {
                self.width * self.height
            }
        }
    };
}

rgb_image_impl!(HdrImage);
rgb_image_impl!(LdrImage);

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.width + ix]
    }

    #[inline]
    pub fn is_valid(&self, ix: usize, iy: usize) -> bool {
        self.data[iy * self.width + ix] > 0.0
    }
}

/// Set of linear pixel indices an operation should touch. Keeping this
/// explicit lets tracking subsample pixels while full-frame operations use
/// [`PixelSet::full`].
#[derive(Debug, Clone)]
pub struct PixelSet {
    pub indices: Vec<u32>,
}

impl PixelSet {
    pub fn full(width: usize, height: usize) -> Self {
        PixelSet {
            indices: (0..(width * height) as u32).collect(),
        }
    }

    /// Every `stride`-th pixel in row-major order.
    pub fn strided(width: usize, height: usize, stride: usize) -> Self {
        PixelSet {
            indices: (0..(width * height) as u32)
                .step_by(stride.max(1))
                .collect(),
        }
    }

    /// `n` pixels sampled uniformly with replacement.
    pub fn sample(rng: &mut impl rand::Rng, width: usize, height: usize, n: usize) -> Self {
        let total = (width * height) as u32;
        PixelSet {
            indices: (0..n).map(|_| rng.gen_range(0..total)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

// ---------------------------------------------------------------------------
// LDR PNG
// ---------------------------------------------------------------------------

/// Quantizes a unit-range value to `u8` by scaling with 255 and rounding
/// half-to-even (banker's rounding), clamping out-of-range inputs.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn write_ldr_png(path: &Path, img: &LdrImage) -> Result<(), ImgError> {
    let mut buf = Vec::with_capacity(img.n_pixels() * 3);
    for px in &img.data {
        buf.push(quantize_u8(px[0]));
        buf.push(quantize_u8(px[1]));
        buf.push(quantize_u8(px[2]));
    }
    let out = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer size matches dimensions");
    out.save(path)
        .map_err(|e| fmt_err(path, format!("png encode failed: {e}")))
}

/// Reads an 8-bit RGB PNG back into unit range (`v / 255`).
pub fn read_ldr_png(path: &Path) -> Result<LdrImage, ImgError> {
    let img = image::open(path)
        .map_err(|e| fmt_err(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = LdrImage::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        out.data[i] = [
            px.0[0] as f64 / 255.0,
            px.0[1] as f64 / 255.0,
            px.0[2] as f64 / 255.0,
        ];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Depth PNG (16-bit grayscale, millimeters)
// ---------------------------------------------------------------------------

pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<(), ImgError> {
    let mut buf = Vec::with_capacity(depth.data.len());
    for &d in &depth.data {
        let mm = if d > 0.0 {
            (d * 1000.0).round_ties_even().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.push(mm);
    }
    let out = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        depth.width as u32,
        depth.height as u32,
        buf,
    )
    .expect("buffer size matches dimensions");
    out.save(path)
        .map_err(|e| fmt_err(path, format!("png encode failed: {e}")))
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage, ImgError> {
    let img = image::open(path)
        .map_err(|e| fmt_err(path, format!("png decode failed: {e}")))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = DepthImage::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        out.data[i] = px.0[0] as f64 / 1000.0;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PFM (portable float map)
// ---------------------------------------------------------------------------

/// Writes a color PFM. Values are narrowed to `f32` as the format requires;
/// rows are stored bottom-up with a negative scale marking little-endian.
pub fn write_pfm(path: &Path, img: &HdrImage) -> Result<(), ImgError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "PF\n{} {}\n-1.0\n", img.width, img.height).map_err(|e| io_err(path, e))?;
    for iy in (0..img.height).rev() {
        for ix in 0..img.width {
            let px = img.at(ix, iy);
            for c in 0..3 {
                w.write_f32::<LittleEndian>(px[c] as f32)
                    .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_pfm(path: &Path) -> Result<HdrImage, ImgError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;

    // Header: three whitespace-terminated tokens.
    let mut pos = 0usize;
    let mut token = || -> Result<String, ImgError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).to_string();
        pos += 1; // single whitespace terminator
        Ok(t)
    };

    let magic = token()?;
    if magic != "PF" {
        return Err(fmt_err(path, format!("expected 'PF' magic, got {magic:?}")));
    }
    let width: usize = token()?
        .parse()
        .map_err(|_| fmt_err(path, "bad width"))?;
    let height: usize = token()?
        .parse()
        .map_err(|_| fmt_err(path, "bad height"))?;
    let scale: f64 = token()?
        .parse()
        .map_err(|_| fmt_err(path, "bad scale"))?;
    let little_endian = scale < 0.0;

    let expected = width * height * 3 * 4;
    if bytes.len() < pos + expected {
        return Err(fmt_err(path, "truncated pixel data"));
    }
    let mut cursor = std::io::Cursor::new(&bytes[pos..pos + expected]);
    let mut img = HdrImage::new(width, height);
    for iy in (0..height).rev() {
        for ix in 0..width {
            let mut px = [0.0f64; 3];
            for c in &mut px {
                let v = if little_endian {
                    cursor.read_f32::<LittleEndian>()
                } else {
                    cursor.read_f32::<byteorder::BigEndian>()
                }
                .map_err(|e| io_err(path, e))?;
                *c = v as f64;
            }
            *img.at_mut(ix, iy) = px;
        }
    }
    Ok(img)
}

//! Single-channel float rasters and their on-disk forms: PNG / PGM / PPM for
//! 8-bit data and a lossless little-endian float dump (`.vfr`).

use std::fs;
use std::path::Path;

use image::ImageEncoder;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Modality {
    Fundus,
    Octa,
    #[default]
    Unknown,
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub modality: Modality,
    /// Optional 0/1 field-of-view mask.
    pub fov: Option<Vec<u8>>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            modality: Modality::Unknown,
            fov: None,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("consistent size")
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn same_dims(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Interleaved 8-bit raster with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ByteImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ByteImage {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }
}

/// Reads PNG, PGM/PPM, TIFF or GIF into 8 bits per channel. Grayscale with
/// alpha drops the alpha channel, RGBA likewise.
pub fn read_bytes(path: &Path) -> Result<ByteImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    if color.has_color() {
        Ok(ByteImage {
            width,
            height,
            channels: 3,
            data: img.into_rgb8().into_raw(),
        })
    } else {
        Ok(ByteImage::gray(width, height, img.into_luma8().into_raw()))
    }
}

/// Writes an 8-bit grayscale or RGB PNG.
pub fn write_png(path: &Path, img: &ByteImage) -> Result<()> {
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Data(format!("cannot write {c}-channel PNG"))),
    };
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&img.data, img.width as u32, img.height as u32, color)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &buf)
}

const DUMP_MAGIC: &str = "VFRAW1";

/// Lossless dump: one ASCII header line `VFRAW1 f64 <width> <height>` then
/// `width * height` little-endian `f64` values, row-major.
pub fn write_dump(path: &Path, img: &Image2D) -> Result<()> {
    let mut buf = format!("{DUMP_MAGIC} f64 {} {}\n", img.width, img.height).into_bytes();
    buf.reserve(8 * img.data.len());
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_dump(path: &Path) -> Result<Image2D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing dump header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "bad header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [magic, "f64", w, h] = fields[..] else {
        return Err(Error::format(path, format!("bad dump header {header:?}")));
    };
    if magic != DUMP_MAGIC {
        return Err(Error::format(path, format!("bad dump magic {magic:?}")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad size {s:?}")));
    let (w, h) = (parse(w)?, parse(h)?);
    let body = &bytes[nl + 1..];
    if body.len() != 8 * w * h {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", 8 * w * h, body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Image2D::new(w, h, data)
}

/// Linear window `[lo, hi] -> [0, 255]` with rounding and clamping.
pub fn window_to_u8(img: &Image2D, lo: f64, hi: f64) -> ByteImage {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = img
        .data
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    ByteImage::gray(img.width, img.height, data)
}

/// Reflect-101 index for `i >= 0` into a side of length `n`, periodic so any
/// amount of padding works.
pub fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

//! Transfer of the trained preprocessing U-Net to OCT-A en face projections.
//!
//! Raw OCT-A values are saturated at 4.0, negated and shifted by 0.5 so that
//! bright vessels become dark like fundus vessels; the frozen U-Net then runs
//! on the result and a 50/50 blend of network input and output is formed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, read_bytes, read_dump, write_dump, write_png, Image2D, Modality};
use crate::tensor::Precision;
use crate::unet::{self, UNetParams};

pub const OCTA_SIZE: usize = 500;
pub const THRESHOLD: f64 = 4.0;
pub const OFFSET: f64 = 0.5;
/// Upper end of the usual capillary intensity range.
pub const CAPILLARY_MAX: f64 = 1.5;
/// Value assigned to the largest code of an 8-bit input (`255 -> 8.0`).
pub const DEFAULT_FULL_SCALE: f64 = 8.0;
/// Output values at or below this count as black responses.
pub const BLACK_LEVEL: f64 = -0.95;

pub const VARIANTS: [&str; 3] = ["raw", "blend", "output"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FieldSize {
    #[serde(rename = "3x3mm")]
    Mm3,
    #[serde(rename = "6x6mm")]
    Mm6,
}

#[derive(Clone, Debug)]
pub struct OctaImage {
    pub id: String,
    pub field_size: Option<FieldSize>,
    pub raster: Image2D,
}

impl OctaImage {
    /// Requires a 500 x 500 raster of finite values.
    pub fn new(id: impl Into<String>, raster: Image2D) -> Result<Self> {
        let id = id.into();
        if raster.width != OCTA_SIZE || raster.height != OCTA_SIZE {
            return Err(Error::Data(format!(
                "OCT-A image {id} is {}x{}, expected {OCTA_SIZE}x{OCTA_SIZE}",
                raster.width, raster.height
            )));
        }
        if raster.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("OCT-A image {id} has non-finite values")));
        }
        Ok(Self {
            id,
            field_size: None,
            raster: raster.with_modality(Modality::Octa),
        })
    }

    /// Reads a float dump (`.vfr`) as is, or an 8-bit PNG/PGM scaled so code
    /// 255 maps to `full_scale`.
    pub fn read(path: &Path, full_scale: f64) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::InvalidArgument(format!("bad input path {}", path.display())))?;
        let raster = if path.extension().is_some_and(|e| e == "vfr") {
            read_dump(path)?
        } else {
            let b = read_bytes(path)?;
            if b.channels != 1 {
                return Err(Error::format(path, "OCT-A input must be single-channel"));
            }
            Image2D::new(b.width, b.height, b.data.iter().map(|&c| c as f64 / 255.0 * full_scale).collect())?
        };
        Self::new(id, raster)
    }

    /// Fraction of pixels above the capillary range and above the threshold.
    pub fn range_diagnostics(&self) -> RangeStats {
        let n = self.raster.data.len() as f64;
        let frac = |t: f64| self.raster.data.iter().filter(|&&v| v > t).count() as f64 / n;
        let (min, max) = self.raster.min_max();
        RangeStats {
            min,
            max,
            above_capillary: frac(CAPILLARY_MAX),
            saturated: frac(THRESHOLD),
            below_zero: self.raster.data.iter().filter(|&&v| v < 0.0).count() as f64 / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub above_capillary: f64,
    pub saturated: f64,
    pub below_zero: f64,
}

/// `v' = -min(v, 4) + 0.5`.
pub fn transform_value(v: f64) -> f64 {
    -v.min(THRESHOLD) + OFFSET
}

pub fn intensity_transform(image: &OctaImage) -> Image2D {
    let mut out = image.raster.clone();
    out.data.iter_mut().for_each(|v| *v = transform_value(*v));
    out
}

/// Elementwise `0.5 a + 0.5 b`.
pub fn blend(a: &Image2D, b: &Image2D) -> Result<Image2D> {
    if !a.same_dims(b) {
        return Err(Error::Data(format!(
            "cannot blend {}x{} with {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o = 0.5 * *o + 0.5 * v;
    }
    Ok(out)
}

/// The three study variants of one image, all in the network input domain.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub raw: Image2D,
    pub output: Image2D,
    pub blend: Image2D,
}

pub fn enhance(image: &OctaImage, unet: &UNetParams) -> Result<Enhanced> {
    let raw = intensity_transform(image);
    let output = unet::pad_and_forward(&raw, unet, Precision::Double)?;
    let blend = blend(&raw, &output)?;
    Ok(Enhanced { raw, output, blend })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub field_size: Option<FieldSize>,
    /// Display windows keyed like the files: raw, blend, output.
    pub windows: Vec<(String, Window)>,
    pub input: RangeStats,
    /// Fraction of output pixels at or below [`BLACK_LEVEL`].
    pub output_black_fraction: f64,
    /// Fraction of pixels clipped by the intensity threshold.
    pub saturated_fraction: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn display_file(variant: &str) -> String {
    format!("{variant}.png")
}

pub fn dump_file(variant: &str) -> String {
    format!("{variant}.vfr")
}

/// Writes `raw.png`, `blend.png`, `output.png` (each min-max windowed to 8
/// bit), the matching `.vfr` float dumps and `manifest.json` into `dir`.
pub fn export_case(image: &OctaImage, e: &Enhanced, dir: &Path) -> Result<CaseManifest> {
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let mut windows = Vec::new();
    for (name, img) in VARIANTS.iter().zip([&e.raw, &e.blend, &e.output]) {
        let (min, max) = img.min_max();
        write_png(&dir.join(display_file(name)), &raster::window_to_u8(img, min, max))?;
        write_dump(&dir.join(dump_file(name)), img)?;
        windows.push((name.to_string(), Window { min, max }));
    }
    let input = image.range_diagnostics();
    let n = e.output.data.len() as f64;
    let manifest = CaseManifest {
        id: image.id.clone(),
        width: e.raw.width,
        height: e.raw.height,
        field_size: image.field_size,
        windows,
        input,
        output_black_fraction: e.output.data.iter().filter(|&&v| v <= BLACK_LEVEL).count() as f64 / n,
        saturated_fraction: input.saturated,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|err| Error::format(dir, err.to_string()))?;
    raster::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// OCT-A inputs of a directory (`.png`, `.pgm`, `.vfr`), sorted by name.
pub fn list_inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "png" || e == "pgm" || e == "vfr") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no .png, .pgm or .vfr images in {}", dir.display())));
    }
    Ok(out)
}

/// Enhances every input of `in_dir` with `unet` and exports one case
/// directory per image under `out_dir`.
pub fn transfer_dir(
    unet: &UNetParams,
    in_dir: &Path,
    out_dir: &Path,
    full_scale: f64,
    mut progress: impl FnMut(&CaseManifest),
) -> Result<Vec<CaseManifest>> {
    let mut out = Vec::new();
    for path in list_inputs(in_dir)? {
        let image = OctaImage::read(&path, full_scale)?;
        let e = enhance(&image, unet)?;
        let m = export_case(&image, &e, &out_dir.join(&image.id))?;
        progress(&m);
        out.push(m);
    }
    Ok(out)
}

/// Writes `count` synthetic 500 x 500 projections as `octa_NN.vfr`.
pub fn write_synthetic(dir: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let data = crate::phantom::octa_phantom(seed + i as u64, OCTA_SIZE);
            let path = dir.join(format!("octa_{:02}.vfr", i + 1));
            write_dump(&path, &Image2D::new(OCTA_SIZE, OCTA_SIZE, data)?)?;
            Ok(path)
        })
        .collect()
}

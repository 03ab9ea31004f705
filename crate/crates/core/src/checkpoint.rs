//! Checkpoint files: a text manifest plus one little-endian `f64` blob.
//!
//! ```text
//! vesselforge-checkpoint 1
//! blob best.bin
//! blob_bytes 1036424
//! blob_sha256 <hex>
//! step 1500
//! config lr0=5e-5
//! ...
//! val_loss 4.1e-1
//! array unet.enc1.conv1.weight f64le 16x1x3x3 offset=0 bytes=1152
//! ...
//! ```
//!
//! The blob sits next to the manifest with the manifest's file stem and a
//! `.bin` extension. Arrays are stored back to back in manifest order. Both
//! files are written atomically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::raster::write_atomic;
use crate::tensor::Array;
use crate::trainer::TrainConfig;

const MAGIC: &str = "vesselforge-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub config: TrainConfig,
    pub val_history: Vec<f64>,
}

/// Blob path belonging to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_file = blob_path(path);
        let blob_name = blob_file
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let params = self.model.params();
        let mut blob = Vec::with_capacity(8 * params.count());
        let mut arrays = String::new();
        for (name, a) in params.iter() {
            let shape: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                arrays,
                "array {name} f64le {} offset={} bytes={}",
                shape.join("x"),
                blob.len(),
                8 * a.len()
            );
            for v in a.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut m = String::new();
        let _ = writeln!(m, "{MAGIC}");
        let _ = writeln!(m, "blob {blob_name}");
        let _ = writeln!(m, "blob_bytes {}", blob.len());
        let _ = writeln!(m, "blob_sha256 {}", hex::encode(Sha256::digest(&blob)));
        let _ = writeln!(m, "step {}", self.step);
        for line in self.config.to_kv().lines() {
            let _ = writeln!(m, "config {line}");
        }
        for v in &self.val_history {
            let _ = writeln!(m, "val_loss {v:e}");
        }
        m.push_str(&arrays);
        write_atomic(&blob_file, &blob)?;
        write_atomic(path, m.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint manifest".into()));
        }
        let mut blob_name = None;
        let mut blob_bytes = None;
        let mut digest = None;
        let mut step = None;
        let mut config_text = String::new();
        let mut val_history = Vec::new();
        let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "blob" => blob_name = Some(rest.to_string()),
                "blob_bytes" => blob_bytes = Some(rest.parse::<usize>().map_err(|_| bad(format!("bad line {line:?}")))?),
                "blob_sha256" => digest = Some(rest.to_string()),
                "step" => step = Some(rest.parse::<u64>().map_err(|_| bad(format!("bad line {line:?}")))?),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "val_loss" => val_history.push(rest.parse::<f64>().map_err(|_| bad(format!("bad line {line:?}")))?),
                "array" => entries.push(parse_array(rest).ok_or_else(|| bad(format!("bad line {line:?}")))?),
                "" => {}
                _ => return Err(bad(format!("unknown manifest key {key:?}"))),
            }
        }
        let blob_name = blob_name.ok_or_else(|| bad("missing blob line".into()))?;
        let blob_file = path.with_file_name(&blob_name);
        let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
        if Some(blob.len()) != blob_bytes {
            return Err(bad(format!(
                "blob {} has {} bytes, manifest says {:?}",
                blob_file.display(),
                blob.len(),
                blob_bytes
            )));
        }
        if digest.as_deref() != Some(hex::encode(Sha256::digest(&blob)).as_str()) {
            return Err(bad(format!("blob {} fails its checksum", blob_file.display())));
        }
        let mut params = ParamStore::new();
        let mut expected_offset = 0;
        for (name, shape, offset, bytes) in entries {
            let n: usize = shape.iter().product();
            if offset != expected_offset || bytes != 8 * n || offset + bytes > blob.len() {
                return Err(bad(format!("array {name} has an inconsistent offset or size")));
            }
            let data = blob[offset..offset + bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Array::new(shape, data)?);
            expected_offset += bytes;
        }
        if expected_offset != blob.len() {
            return Err(bad("blob has trailing bytes".into()));
        }
        Ok(Self {
            model: Model::from_store(params)?,
            step: step.ok_or_else(|| bad("missing step line".into()))?,
            config: TrainConfig::parse_kv(&config_text)?,
            val_history,
        })
    }
}

fn parse_array(rest: &str) -> Option<(String, Vec<usize>, usize, usize)> {
    let mut it = rest.split(' ');
    let name = it.next()?.to_string();
    if it.next()? != "f64le" {
        return None;
    }
    let shape = it
        .next()?
        .split('x')
        .map(|d| d.parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    let offset = it.next()?.strip_prefix("offset=")?.parse().ok()?;
    let bytes = it.next()?.strip_prefix("bytes=")?.parse().ok()?;
    Some((name, shape, offset, bytes))
}

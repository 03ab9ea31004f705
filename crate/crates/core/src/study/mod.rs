//! Blinded reader study: case assembly, randomized presentation, grade
//! capture and summary statistics.
//!
//! A study is a directory:
//!
//! ```text
//! study.json          seed and case list
//! cases/<id>/         raw|blend|output .png and .vfr copied from the transfer output
//! grades.jsonl        append-only grade log, one record per displayed image
//! ```

mod report;
pub mod server;

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::octa::{self, VARIANTS};
use crate::raster::{read_dump, write_atomic};

pub use report::{report, Cell, RaterCoverage, StdKind, StudyReport, ASPECTS};

pub const MANIFEST: &str = "study.json";
pub const GRADES: &str = "grades.jsonl";
pub const CASES: &str = "cases";

/// The six orderings of variant indices into [`VARIANTS`].
pub const ORDERINGS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyCase {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub seed: u64,
    pub cases: Vec<StudyCase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub case_id: String,
    pub rater_id: String,
    pub position: u8,
    pub variant: String,
    pub iq: u8,
    pub vc: u8,
    pub dq: u8,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// One displayed image of a presentation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownImage {
    pub position: u8,
    pub handle: String,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub id: String,
    pub case_id: String,
    pub images: Vec<ShownImage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Next {
    Presentation(Presentation),
    Complete { graded: usize, total: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionGrades {
    pub position: f64,
    pub iq: f64,
    pub vc: f64,
    pub dq: f64,
}

/// Body of `POST /api/study/grades`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeSubmission {
    pub rater: String,
    pub presentation: String,
    pub grades: Vec<PositionGrades>,
}

fn digest_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..32].to_string()
}

/// Permutation of variant indices shown to `rater` for case `case_index`.
pub fn ordering(seed: u64, rater: &str, case_index: usize) -> [usize; 3] {
    let d = Sha256::digest(format!("order:{seed}:{rater}:{case_index}").as_bytes());
    let key = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    ORDERINGS[ChaCha8Rng::seed_from_u64(key).random_range(0..6)]
}

fn image_handle(seed: u64, case_id: &str, variant: &str) -> String {
    digest_hex(&format!("img:{seed}:{case_id}:{variant}"))
}

fn presentation_id(seed: u64, rater: &str, case_index: usize) -> String {
    digest_hex(&format!("pres:{seed}:{rater}:{case_index}"))
}

pub fn validate_rater(rater: &str) -> Result<()> {
    let ok = !rater.is_empty()
        && rater.len() <= 64
        && rater.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Rejected(format!(
            "rater id {rater:?} must be 1-64 characters of letters, digits, '-', '_' or '.'"
        )))
    }
}

#[derive(Debug)]
pub struct Study {
    dir: PathBuf,
    manifest: StudyManifest,
    records: Vec<GradeRecord>,
    graded: HashSet<(String, String)>,
    handles: HashMap<String, (usize, usize)>,
}

impl Study {
    /// Collects every case directory of `cases_dir` (the output of
    /// `transfer`) into a study at `study_dir`. Rebuilding over unchanged
    /// inputs leaves the study byte-identical; changing the case list of a
    /// study that already has grades is refused.
    pub fn build(cases_dir: &Path, study_dir: &Path, seed: u64) -> Result<Self> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(cases_dir).map_err(|e| Error::io(cases_dir, e))? {
            let path = entry.map_err(|e| Error::io(cases_dir, e))?.path();
            if path.is_dir() {
                ids.push(path.file_name().expect("entry name").to_string_lossy().into_owned());
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Study(format!("no case directories in {}", cases_dir.display())));
        }
        let mut cases = Vec::new();
        for id in &ids {
            let dir = cases_dir.join(id);
            let mut dims = None;
            for v in VARIANTS {
                for f in [octa::display_file(v), octa::dump_file(v)] {
                    if !dir.join(&f).is_file() {
                        return Err(Error::Study(format!("case {id}: missing variant '{v}' ({f})")));
                    }
                }
                let img = read_dump(&dir.join(octa::dump_file(v)))?;
                match dims {
                    None => dims = Some((img.width, img.height)),
                    Some(d) if d != (img.width, img.height) => {
                        return Err(Error::Study(format!(
                            "case {id}: variant '{v}' is {}x{}, others are {}x{}",
                            img.width, img.height, d.0, d.1
                        )))
                    }
                    _ => {}
                }
            }
            let (width, height) = dims.expect("three variants");
            cases.push(StudyCase {
                id: id.clone(),
                width,
                height,
            });
        }
        let manifest = StudyManifest { seed, cases };
        let manifest_path = study_dir.join(MANIFEST);
        if manifest_path.exists() {
            let old = Self::open(study_dir)?;
            if old.manifest != manifest && !old.records.is_empty() {
                return Err(Error::Study(format!(
                    "{} already holds grades for a different case list or seed",
                    study_dir.display()
                )));
            }
        }
        for c in &manifest.cases {
            let dst = study_dir.join(CASES).join(&c.id);
            fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
            for v in VARIANTS {
                for f in [octa::display_file(v), octa::dump_file(v)] {
                    let src = cases_dir.join(&c.id).join(&f);
                    let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
                    write_atomic(&dst.join(&f), &bytes)?;
                }
            }
        }
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Study(e.to_string()))?;
        write_atomic(&manifest_path, json.as_bytes())?;
        Self::open(study_dir)
    }

    pub fn open(study_dir: &Path) -> Result<Self> {
        let path = study_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StudyManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let grades = study_dir.join(GRADES);
        let mut records = Vec::new();
        if grades.exists() {
            let text = fs::read_to_string(&grades).map_err(|e| Error::io(&grades, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                records.push(
                    serde_json::from_str::<GradeRecord>(line)
                        .map_err(|e| Error::format(&grades, format!("line {}: {e}", i + 1)))?,
                );
            }
        }
        let mut handles = HashMap::new();
        for (ci, c) in manifest.cases.iter().enumerate() {
            for (vi, v) in VARIANTS.iter().enumerate() {
                handles.insert(image_handle(manifest.seed, &c.id, v), (ci, vi));
            }
        }
        let graded = records.iter().map(|r| (r.case_id.clone(), r.rater_id.clone())).collect();
        Ok(Self {
            dir: study_dir.to_path_buf(),
            manifest,
            records,
            graded,
            handles,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &StudyManifest {
        &self.manifest
    }

    pub fn records(&self) -> &[GradeRecord] {
        &self.records
    }

    pub fn case_count(&self) -> usize {
        self.manifest.cases.len()
    }

    /// Raters with at least one graded case, sorted.
    pub fn raters(&self) -> Vec<String> {
        let mut r: Vec<String> = self.records.iter().map(|r| r.rater_id.clone()).collect::<HashSet<_>>().into_iter().collect();
        r.sort();
        r
    }

    fn presentation(&self, rater: &str, case_index: usize) -> Presentation {
        let case = &self.manifest.cases[case_index];
        let order = ordering(self.manifest.seed, rater, case_index);
        let images = order
            .iter()
            .enumerate()
            .map(|(pos, &vi)| {
                let handle = image_handle(self.manifest.seed, &case.id, VARIANTS[vi]);
                ShownImage {
                    position: pos as u8,
                    url: format!("/img/{handle}"),
                    handle,
                }
            })
            .collect();
        Presentation {
            id: presentation_id(self.manifest.seed, rater, case_index),
            case_id: case.id.clone(),
            images,
        }
    }

    /// The first case in study order that `rater` has not graded.
    pub fn next_presentation(&self, rater: &str) -> Result<Next> {
        validate_rater(rater)?;
        let total = self.case_count();
        let graded = self
            .manifest
            .cases
            .iter()
            .filter(|c| self.graded.contains(&(c.id.clone(), rater.to_string())))
            .count();
        for (i, c) in self.manifest.cases.iter().enumerate() {
            if !self.graded.contains(&(c.id.clone(), rater.to_string())) {
                return Ok(Next::Presentation(self.presentation(rater, i)));
            }
        }
        Ok(Next::Complete { graded, total })
    }

    /// Validates a submission and appends its three records to the log.
    pub fn submit(&mut self, s: &GradeSubmission) -> Result<Vec<GradeRecord>> {
        validate_rater(&s.rater)?;
        let case_index = (0..self.case_count())
            .find(|&i| presentation_id(self.manifest.seed, &s.rater, i) == s.presentation)
            .ok_or_else(|| Error::Rejected(format!("unknown presentation {:?} for rater {}", s.presentation, s.rater)))?;
        let case_id = self.manifest.cases[case_index].id.clone();
        if self.graded.contains(&(case_id.clone(), s.rater.clone())) {
            return Err(Error::Rejected(format!(
                "duplicate: rater {} already graded case {case_id}",
                s.rater
            )));
        }
        if s.grades.len() != 3 {
            return Err(Error::Rejected(format!("grades: expected 3 entries, got {}", s.grades.len())));
        }
        let order = ordering(self.manifest.seed, &s.rater, case_index);
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut seen = [false; 3];
        let mut records = Vec::with_capacity(3);
        for (k, g) in s.grades.iter().enumerate() {
            let pos = integral(g.position, 0, 2).ok_or_else(|| {
                Error::Rejected(format!("grades[{k}].position: {} is not 0, 1 or 2", g.position))
            })?;
            if std::mem::replace(&mut seen[pos as usize], true) {
                return Err(Error::Rejected(format!("grades[{k}].position: position {pos} given twice")));
            }
            let mut vals = [0u8; 3];
            for (slot, (field, v)) in vals.iter_mut().zip([("iq", g.iq), ("vc", g.vc), ("dq", g.dq)]) {
                *slot = integral(v, 1, 5).ok_or_else(|| {
                    Error::Rejected(format!("grades[{k}].{field}: {v} is not an integer grade from 1 to 5"))
                })?;
            }
            records.push(GradeRecord {
                case_id: case_id.clone(),
                rater_id: s.rater.clone(),
                position: pos,
                variant: VARIANTS[order[pos as usize]].to_string(),
                iq: vals[0],
                vc: vals[1],
                dq: vals[2],
                timestamp,
            });
        }
        records.sort_by_key(|r| r.position);
        let mut buf = String::new();
        for r in &records {
            buf += &serde_json::to_string(r).map_err(|e| Error::Study(e.to_string()))?;
            buf.push('\n');
        }
        let path = self.dir.join(GRADES);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))?;
        self.graded.insert((case_id, s.rater.clone()));
        self.records.extend(records.iter().cloned());
        Ok(records)
    }

    /// File behind an image handle.
    pub fn image_path(&self, handle: &str) -> Option<PathBuf> {
        let &(ci, vi) = self.handles.get(handle)?;
        Some(
            self.dir
                .join(CASES)
                .join(&self.manifest.cases[ci].id)
                .join(octa::display_file(VARIANTS[vi])),
        )
    }

    pub fn report(&self, kind: StdKind) -> StudyReport {
        report(&self.records, self.case_count(), kind)
    }

    /// Grade log as CSV.
    pub fn export_csv(&self, path: &Path) -> Result<usize> {
        let mut out = String::from("case_id,rater_id,position,variant,iq,vc,dq,timestamp\n");
        for r in &self.records {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.case_id, r.rater_id, r.position, r.variant, r.iq, r.vc, r.dq, r.timestamp
            );
        }
        write_atomic(path, out.as_bytes())?;
        Ok(self.records.len())
    }
}

fn integral(v: f64, lo: u8, hi: u8) -> Option<u8> {
    (v.fract() == 0.0 && v >= lo as f64 && v <= hi as f64).then_some(v as u8)
}

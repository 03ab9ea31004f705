use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GradeRecord;
use crate::octa::VARIANTS;

pub const ASPECTS: [&str; 3] = ["IQ", "VC", "DQ"];

/// Spread across raters: divide by `n` or by `n - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub raters: usize,
}

impl Cell {
    /// One-decimal display form, e.g. `3.0±0.8`.
    pub fn display(&self) -> String {
        format!("{:.1}±{:.1}", self.mean, self.std)
    }

    pub fn latex(&self) -> String {
        format!("${:.1}\\pm{:.1}$", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterCoverage {
    pub rater: String,
    pub cases_graded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub empty: bool,
    pub std_kind: StdKind,
    pub total_cases: usize,
    pub raters: Vec<RaterCoverage>,
    /// `cells[variant][aspect]`.
    pub cells: BTreeMap<String, BTreeMap<String, Cell>>,
}

impl StudyReport {
    pub fn cell(&self, variant: &str, aspect: &str) -> Option<&Cell> {
        self.cells.get(variant)?.get(aspect)
    }

    /// Plain-text table: aspects as rows, variants as columns.
    pub fn render_text(&self) -> String {
        if self.empty {
            return "no grades recorded\n".to_string();
        }
        let mut out = format!("{:<4}{:>12}{:>12}{:>12}\n", "", "raw input", "blend", "output");
        for a in ASPECTS {
            out += &format!("{a:<4}");
            for v in VARIANTS {
                out += &format!("{:>12}", self.cell(v, a).map(Cell::display).unwrap_or_default());
            }
            out.push('\n');
        }
        out += &format!(
            "raters: {}  cases: {}  std: {:?}\n",
            self.raters
                .iter()
                .map(|r| format!("{} ({}/{})", r.rater, r.cases_graded, self.total_cases))
                .collect::<Vec<_>>()
                .join(", "),
            self.total_cases,
            self.std_kind
        );
        out
    }

    /// One LaTeX tabular row per aspect, e.g. `IQ & $3.0\pm0.8$ & ... \\`.
    pub fn latex_rows(&self) -> String {
        let mut out = String::new();
        for a in ASPECTS {
            let cols: Vec<String> = VARIANTS
                .iter()
                .map(|v| self.cell(v, a).map(Cell::latex).unwrap_or_else(|| "--".into()))
                .collect();
            out += &format!("{a} & {} \\\\\n", cols.join(" & "));
        }
        out
    }
}

fn spread(values: &[f64], kind: StdKind) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => (n - 1.0).max(1.0),
    };
    (mean, (ss / denom).sqrt())
}

/// Grades are first averaged per rater over that rater's cases, then the
/// mean and spread of those averages are taken across raters. The result
/// does not depend on the order of `records`.
pub fn report(records: &[GradeRecord], total_cases: usize, kind: StdKind) -> StudyReport {
    // rater -> variant -> aspect -> (sum, count)
    let mut acc: BTreeMap<&str, BTreeMap<&str, [(f64, usize); 3]>> = BTreeMap::new();
    let mut cases: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        let slot = acc.entry(&r.rater_id).or_default().entry(&r.variant).or_default();
        for (k, g) in [r.iq, r.vc, r.dq].into_iter().enumerate() {
            slot[k].0 += g as f64;
            slot[k].1 += 1;
        }
        cases.entry(&r.rater_id).or_default().insert(&r.case_id);
    }
    let mut cells: BTreeMap<String, BTreeMap<String, Cell>> = BTreeMap::new();
    for v in VARIANTS {
        for (k, a) in ASPECTS.iter().enumerate() {
            let avgs: Vec<f64> = acc
                .values()
                .filter_map(|per| per.get(v))
                .map(|s| s[k].0 / s[k].1 as f64)
                .collect();
            if avgs.is_empty() {
                continue;
            }
            let (mean, std) = spread(&avgs, kind);
            cells.entry(v.to_string()).or_default().insert(
                a.to_string(),
                Cell {
                    mean,
                    std,
                    raters: avgs.len(),
                },
            );
        }
    }
    StudyReport {
        empty: records.is_empty(),
        std_kind: kind,
        total_cases,
        raters: cases
            .into_iter()
            .map(|(r, c)| RaterCoverage {
                rater: r.to_string(),
                cases_graded: c.len(),
            })
            .collect(),
        cells,
    }
}

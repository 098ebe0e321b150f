//! Run reports and their files: JSON report, CSV series, SVG plots.

use crate::config::ExperimentConfig;
use crate::plot;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
    #[serde(rename = "==")]
    Equal,
}

impl Comparison {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtMost => value <= threshold,
            Comparison::AtLeast => value >= threshold,
            Comparison::Below => value < threshold,
            Comparison::Above => value > threshold,
            Comparison::Equal => value == threshold,
        }
    }
    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
            Comparison::Below => "<",
            Comparison::Above => ">",
            Comparison::Equal => "==",
        }
    }
}

/// One thresholded measurement, tagged with its acceptance criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub criterion: u8,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Check {
    pub fn new(criterion: u8, name: impl Into<String>, value: f64, comparison: Comparison, threshold: f64) -> Self {
        let pass = !value.is_nan() && comparison.holds(value, threshold);
        Check { name: name.into(), criterion, value, comparison, threshold, pass, note: String::new() }
    }
    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
    /// A check that could not be evaluated.
    pub fn failed(criterion: u8, name: impl Into<String>, note: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            criterion,
            value: f64::NAN,
            comparison: Comparison::Equal,
            threshold: 0.0,
            pass: false,
            note: note.into(),
        }
    }
}

/// A `(t, value)` series with its decay fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    pub fitted_exponent: Option<f64>,
    pub fit_residual: f64,
    pub excluded: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub operator_norms: Vec<f64>,
}

impl Series {
    pub fn from_report(name: impl Into<String>, r: &hindex::morphisms::DefectReport) -> Self {
        Series {
            name: name.into(),
            t: r.t_values.clone(),
            values: r.defect_norms.clone(),
            fitted_exponent: r.fitted_exponent,
            fit_residual: r.fit_residual,
            excluded: r.excluded.clone(),
            operator_norms: r.operator_norms.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub series: Vec<Series>,
    pub timings: Vec<Timing>,
    pub artifacts: Vec<Artifact>,
}

impl RunReport {
    pub fn new(config: ExperimentConfig) -> Self {
        RunReport { config, checks: Vec::new(), series: Vec::new(), timings: Vec::new(), artifacts: Vec::new() }
    }
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
    pub fn checks_for(&self, criterion: u8) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.criterion == criterion)
    }
    pub fn timing(&self, name: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.name == name).map(|t| t.seconds)
    }
}

/// CSV of every series: `series,t,value,excluded`. Header only when empty.
pub fn series_csv(series: &[Series]) -> String {
    let mut out = String::from("series,t,value,excluded\n");
    for s in series {
        for (k, (t, v)) in s.t.iter().zip(&s.values).enumerate() {
            out.push_str(&format!("{},{:e},{:e},{}\n", s.name, t, v, s.excluded.get(k).copied().unwrap_or(false)));
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
}

/// Write `report.json`, `series.csv` and one SVG per series into `dir`.
/// Artifact hashes cover the CSV and plots; the report is written last.
pub fn emit_report(r: &mut RunReport, dir: &Path, _format: Format) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut artifacts = Vec::new();
    let csv = series_csv(&r.series);
    let p = dir.join("series.csv");
    std::fs::write(&p, &csv)?;
    artifacts.push(Artifact { path: "series.csv".into(), sha256: sha256_hex(csv.as_bytes()) });
    written.push(p);
    if r.config.output.plots {
        for s in r.series.iter().filter(|s| !s.t.is_empty()) {
            let svg = plot::loglog_svg(s);
            let name = format!("{}.svg", plot::file_stem(&s.name));
            let p = dir.join(&name);
            std::fs::write(&p, &svg)?;
            artifacts.push(Artifact { path: name, sha256: sha256_hex(svg.as_bytes()) });
            written.push(p);
        }
    }
    r.artifacts = artifacts;
    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(r).expect("report serializes"))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Suite;

    fn series(n: usize) -> Series {
        Series {
            name: "mult".into(),
            t: (0..n).map(|k| 2f64.powi(k as i32)).collect(),
            values: (0..n).map(|k| 0.5f64.powi(k as i32)).collect(),
            fitted_exponent: Some(-1.0),
            fit_residual: 0.0,
            excluded: vec![false; n],
            operator_norms: Vec::new(),
        }
    }

    #[test]
    fn empty_suite_gives_header_only_csv() {
        assert_eq!(series_csv(&[]), "series,t,value,excluded\n");
    }

    #[test]
    fn four_points_give_four_rows_and_one_plot() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunReport::new(ExperimentConfig::new(Suite::Defects));
        r.series.push(series(4));
        let files = emit_report(&mut r, dir.path(), Format::Json).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(files.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).count(), 1);
        assert_eq!(r.artifacts.len(), 2);
    }

    #[test]
    fn failed_checks_never_pass() {
        assert!(!Check::failed(3, "x", "error").pass);
        assert!(!Check::new(3, "nan", f64::NAN, Comparison::AtMost, 1.0).pass);
        assert!(Check::new(3, "ok", -1.0, Comparison::AtMost, -0.8).pass);
    }
}

//! JSON and CSV reports.
//!
//! Wall-clock timings are kept out of the metric reports and written to their
//! own file, so reruns with the same inputs produce byte-identical reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::formats::write_file;
use crate::io::metrics::{MetricsRecord, SSIM_SIGMA, SSIM_WINDOW};
use crate::pipeline::{AblationReport, EditResult, JobConfig, PhaseTimings, StartMode, TimingRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub psnr_peak: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            psnr_peak: crate::io::metrics::PEAK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    pub n_masks: usize,
    pub start: StartMode,
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
    pub metric_settings: MetricSettings,
    pub config: JobConfig,
    pub cases: Vec<CaseRow>,
}

impl EditReport {
    pub fn new(config: &JobConfig, iterative: bool) -> Self {
        Self {
            mode: if iterative { "iterative" } else { "single-pass" }.into(),
            note: iterative.then(|| "iterative mode re-runs this engine once per mask".to_string()),
            metric_settings: MetricSettings::default(),
            config: config.clone(),
            cases: Vec::new(),
        }
    }

    pub fn push(&mut self, r: &EditResult, n_masks: usize) {
        self.cases.push(CaseRow {
            id: r.id.clone(),
            n_masks,
            start: r.start,
            metrics: r.metrics.clone(),
        });
    }
}

/// Pass thresholds for the shipped bench.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_target_fidelity: f64,
    pub max_source_fidelity: f64,
    pub min_bg_psnr: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_target_fidelity: 0.9,
            max_source_fidelity: 0.2,
            min_bg_psnr: 35.0,
        }
    }
}

impl Thresholds {
    /// Names of the thresholds `m` misses.
    pub fn misses(&self, m: &MetricsRecord) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !m.target_fidelity.is_some_and(|v| v >= self.min_target_fidelity) {
            out.push("target_fidelity");
        }
        if !m.source_fidelity.is_some_and(|v| v <= self.max_source_fidelity) {
            out.push("source_fidelity");
        }
        if !m.bg_psnr.is_some_and(|v| v >= self.min_bg_psnr) {
            out.push("bg_psnr");
        }
        out
    }
}

/// Reference metrics of the shipped bench under the default configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Golden {
    pub config: JobConfig,
    pub thresholds: Thresholds,
    pub cases: Vec<CaseRow>,
}

impl Golden {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::formats::read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub id: String,
    pub timings: PhaseTimings,
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => serde_json::to_string(&x).expect("finite float"),
    }
}

const METRIC_COLUMNS: [&str; 5] = ["bg_psnr", "bg_ssim", "source_fidelity", "target_fidelity", "structural_proxy"];

fn metric_cells(m: &MetricsRecord) -> Vec<String> {
    vec![
        cell(m.bg_psnr),
        cell(m.bg_ssim),
        cell(m.source_fidelity),
        cell(m.target_fidelity),
        cell(Some(m.structural_proxy)),
    ]
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn render_edit(report: &EditReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => Ok(to_json(report).into_bytes()),
        ReportFormat::Csv => {
            let mut header = vec!["id", "n_masks", "start"];
            header.extend(METRIC_COLUMNS);
            csv_bytes(
                &header,
                report.cases.iter().map(|c| {
                    let start = serde_json::to_value(c.start).expect("enum").as_str().unwrap_or("").to_string();
                    let mut r = vec![c.id.clone(), c.n_masks.to_string(), start];
                    r.extend(metric_cells(&c.metrics));
                    r
                }),
            )
        }
    }
}

pub fn render_ablation(report: &AblationReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => Ok(to_json(report).into_bytes()),
        ReportFormat::Csv => {
            let mut header = vec!["axis", "value", "label", "job"];
            header.extend(METRIC_COLUMNS);
            let axis = serde_json::to_value(report.axis).expect("enum").as_str().unwrap_or("").to_string();
            csv_bytes(
                &header,
                report.rows.iter().map(|row| {
                    let mut r = vec![axis.clone(), cell(Some(row.value)), row.label.clone(), row.job.clone()];
                    r.extend(metric_cells(&row.metrics));
                    r
                }),
            )
        }
    }
}

pub fn render_timing(rows: &[TimingRow], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => Ok(to_json(&rows).into_bytes()),
        ReportFormat::Csv => csv_bytes(
            &["n_masks", "single_pass_s", "iterative_s", "speedup"],
            rows.iter().map(|r| {
                vec![
                    r.n_masks.to_string(),
                    cell(Some(r.single_pass)),
                    cell(Some(r.iterative)),
                    cell(Some(r.speedup)),
                ]
            }),
        ),
    }
}

pub fn render_timings(entries: &[TimingEntry]) -> Vec<u8> {
    to_json(&entries).into_bytes()
}

pub fn write_report(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

//! Effect tables (text and CSV) and run manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientStats;
use crate::digest::sha256_hex;
use crate::effects::{EffectMode, EffectReport};
use crate::jsonl::{self, JsonlError};
use crate::model::ModelSpec;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{layout} table given a {found} report for {model} / {task}")]
    ModeMismatch {
        layout: EffectMode,
        found: EffectMode,
        model: String,
        task: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("stage record {path}: {source}")]
    Stage {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// Renders `num / den` as a percentage with one decimal, rounding half away
/// from zero on the exact ratio.
pub fn percent_of(num: i64, den: u64) -> String {
    if den == 0 {
        return "-".to_string();
    }
    let scaled = num as i128 * 1000;
    let den = den as i128;
    let (q, r) = (scaled / den, scaled % den);
    let tenths = if 2 * r.abs() >= den { q + scaled.signum() } else { q };
    let sign = if tenths < 0 { "-" } else { "" };
    format!("{sign}{}.{}", tenths.abs() / 10, tenths.abs() % 10)
}

/// Renders a fraction as percentage points with one decimal.
pub fn percent(x: f64) -> String {
    if x.is_nan() {
        return "-".to_string();
    }
    let s = format!("{:.1}", x * 100.0);
    if s == "-0.0" {
        "0.0".to_string()
    } else {
        s
    }
}

/// Thresholded p-value display; values at or above 0.05 print with three
/// decimals.
pub fn pvalue_bucket(p: f64) -> String {
    for t in ["0.001", "0.005", "0.01", "0.05"] {
        if p < t.parse::<f64>().expect("literal") {
            return format!("<{t}");
        }
    }
    if p.is_nan() {
        "-".to_string()
    } else {
        format!("{p:.3}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
}

/// The CSV row schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub task: String,
    pub model: String,
    pub mode: EffectMode,
    pub n: u64,
    pub acc_x0r0: f64,
    pub acc_x0r1: f64,
    pub acc_x1r0: f64,
    pub ie: f64,
    pub de: f64,
    pub flip_rate: Option<f64>,
    pub p_ie: f64,
    pub p_de: f64,
    pub seed: u64,
}

impl From<&EffectReport> for CsvRow {
    fn from(r: &EffectReport) -> Self {
        CsvRow {
            task: r.task.clone(),
            model: r.model.clone(),
            mode: r.mode,
            n: r.n,
            acc_x0r0: r.acc_x0r0,
            acc_x0r1: r.acc_x0r1,
            acc_x1r0: r.acc_x1r0,
            ie: r.ie,
            de: r.de,
            flip_rate: r.flip_rate,
            p_ie: r.p_ie,
            p_de: r.p_de,
            seed: r.seed,
        }
    }
}

pub fn effects_csv(reports: &[EffectReport]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if reports.is_empty() {
        w.write_record([
            "task", "model", "mode", "n", "acc_x0r0", "acc_x0r1", "acc_x1r0", "ie", "de", "flip_rate", "p_ie",
            "p_de", "seed",
        ])?;
    }
    for r in reports {
        w.serialize(CsvRow::from(r))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_effects_csv(text: &str) -> Result<Vec<CsvRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn cells(r: &EffectReport, layout: EffectMode) -> Vec<String> {
    let n = r.n;
    let diff = |a: u64, b: u64| percent_of(a as i64 - b as i64, n);
    match layout {
        EffectMode::Natural => vec![
            percent_of(r.correct_x0r0 as i64, n),
            diff(r.correct_x0r0, r.correct_x0r1),
            diff(r.correct_x0r0, r.correct_x1r0),
        ],
        EffectMode::Controlled => vec![
            diff(r.correct_x0r0, r.correct_x0r1),
            diff(r.correct_x0r0, r.correct_x1r0),
            pvalue_bucket(r.p_ie),
        ],
    }
}

/// Wide table: one row per model, a column group per task. Natural groups
/// are `CoT(%) | NIE | NDE`; controlled groups are `CIE | CDE | p-value`.
pub fn effects_table(reports: &[EffectReport], layout: EffectMode) -> Result<RenderedTable, ReportError> {
    for r in reports {
        if r.mode != layout {
            return Err(ReportError::ModeMismatch {
                layout,
                found: r.mode,
                model: r.model.clone(),
                task: r.task.clone(),
            });
        }
    }
    let mut tasks: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let by_key: BTreeMap<(&str, &str), &EffectReport> =
        reports.iter().map(|r| ((r.model.as_str(), r.task.as_str()), r)).collect();
    let group: [&str; 3] = match layout {
        EffectMode::Natural => ["CoT(%)", layout.ie_label(), layout.de_label()],
        EffectMode::Controlled => [layout.ie_label(), layout.de_label(), "p-value"],
    };

    let mut text = String::new();
    let mut header = vec!["Model".to_string()];
    for t in &tasks {
        for g in group {
            header.push(format!("{t} {g}"));
        }
    }
    if tasks.is_empty() {
        header.extend(group.iter().map(|g| g.to_string()));
    }
    let _ = writeln!(text, "{}", header.join(" | "));
    for m in &models {
        let mut row = vec![m.to_string()];
        for t in &tasks {
            match by_key.get(&(*m, *t)) {
                Some(r) => row.extend(cells(r, layout)),
                None => row.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
            }
        }
        let _ = writeln!(text, "{}", row.join(" | "));
    }
    Ok(RenderedTable {
        text,
        csv: effects_csv(reports)?,
    })
}

/// A file produced or consumed by a stage, with its content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<u64>,
}

impl FileDigest {
    /// Digest of a file; `records` counts non-blank lines for JSONL files.
    pub fn of(path: &Path, display: impl Into<String>) -> std::io::Result<Self> {
        let bytes = fs::read(path)?;
        let records = path
            .extension()
            .is_some_and(|e| e == "jsonl")
            .then(|| bytes.split(|b| *b == b'\n').filter(|l| !l.iter().all(u8::is_ascii_whitespace)).count() as u64);
        Ok(Self {
            path: display.into(),
            sha256: sha256_hex(&bytes),
            records,
        })
    }
}

/// What each pipeline stage writes to `<run>/stages/<stage>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<ClientStats>,
    pub completed_at: DateTime<Utc>,
}

pub const STAGES: [&str; 5] = ["intervene", "curate", "chains", "evaluate", "effects"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<StageRecord>,
    /// Why the stage is incomplete.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: String,
    pub stages: Vec<StageSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curation_log_sha256: Option<String>,
    pub generated_at: DateTime<Utc>,
}

impl Manifest {
    pub fn complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Complete)
    }
}

pub fn stage_path(run: &Path, stage: &str) -> PathBuf {
    run.join("stages").join(format!("{stage}.json"))
}

pub fn write_stage(run: &Path, record: &StageRecord) -> Result<(), ReportError> {
    Ok(jsonl::write_json(&stage_path(run, &record.stage), record)?)
}

/// Collects stage records; a stage is complete when its record exists and
/// every listed output is present with the recorded digest.
pub fn manifest(run: &Path) -> Result<Manifest, ReportError> {
    if !run.is_dir() {
        return Err(ReportError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("run directory {} does not exist", run.display()),
        )));
    }
    let mut names: BTreeSet<String> = STAGES.iter().map(|s| s.to_string()).collect();
    if let Ok(dir) = fs::read_dir(run.join("stages")) {
        for e in dir.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "json") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    names.insert(stem.to_string());
                }
            }
        }
    }
    let mut order: Vec<String> = STAGES.iter().map(|s| s.to_string()).collect();
    order.extend(names.into_iter().filter(|n| !STAGES.contains(&n.as_str())));

    let mut stages = Vec::new();
    let mut curation_log = None;
    for name in order {
        let path = stage_path(run, &name);
        let Ok(text) = fs::read_to_string(&path) else {
            stages.push(StageSummary {
                stage: name,
                status: StageStatus::Incomplete,
                record: None,
                problems: vec!["no stage record".into()],
            });
            continue;
        };
        let record: StageRecord =
            serde_json::from_str(&text).map_err(|source| ReportError::Stage { path: path.clone(), source })?;
        let mut problems = Vec::new();
        for out in &record.outputs {
            match FileDigest::of(&run.join(&out.path), out.path.clone()) {
                Ok(d) if d.sha256 == out.sha256 => {}
                Ok(_) => problems.push(format!("{} changed since the stage ran", out.path)),
                Err(_) => problems.push(format!("{} is missing", out.path)),
            }
        }
        if name == "curate" {
            curation_log = record
                .inputs
                .iter()
                .find(|i| i.path.contains("decision"))
                .map(|i| i.sha256.clone());
        }
        stages.push(StageSummary {
            stage: name,
            status: if problems.is_empty() {
                StageStatus::Complete
            } else {
                StageStatus::Incomplete
            },
            record: Some(record),
            problems,
        });
    }
    Ok(Manifest {
        run: run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        stages,
        curation_log_sha256: curation_log,
        generated_at: Utc::now(),
    })
}

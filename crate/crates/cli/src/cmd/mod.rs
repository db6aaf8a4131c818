pub mod chains;
pub mod curate;
pub mod effects;
pub mod evaluate;
pub mod intervene;
pub mod las;
pub mod mock;
pub mod report;
pub mod score;

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Context;
use cotmed::intervene::{CurationStatus, InterventionPair};
use cotmed::jsonl::read_jsonl;
use cotmed::Problem;
use serde::de::DeserializeOwned;

pub fn read<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    read_jsonl(path).with_context(|| format!("loading {}", path.display()))
}

pub fn problems(path: &Path) -> anyhow::Result<Vec<Problem>> {
    cotmed::datasets::load_any_problems(path).with_context(|| format!("loading problems {}", path.display()))
}

/// Accepted interventions keyed by original problem id.
pub fn accepted(path: &Path) -> anyhow::Result<HashMap<String, InterventionPair>> {
    let pairs: Vec<InterventionPair> = read(path)?;
    Ok(pairs
        .into_iter()
        .filter(|p| p.curation == CurationStatus::Accepted)
        .map(|p| (p.original_id.clone(), p))
        .collect())
}

/// Prints per-item failures and turns them into the exit status.
pub fn finish_with(failures: &[String]) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    eprintln!("{} item(s) failed:", failures.len());
    for f in failures {
        eprintln!("  {f}");
    }
    ExitCode::FAILURE
}

/// Model ids like `org/model` made safe for a file name.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

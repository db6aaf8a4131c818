//! Batch curation of pending intervention pairs.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CurationStatus, InterventionPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

/// One entry of the append-only curation log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationDecision {
    pub original_id: String,
    pub verdict: Verdict,
    pub decider: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CurationError {
    #[error("decision references unknown pair `{0}`")]
    UnknownId(String),
    #[error("pair `{0}` has more than one decision")]
    DoubleDecision(String),
    #[error("pair `{0}` is not pending")]
    NotPending(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutcome {
    /// Every input pair with its updated status, in input order.
    pub all: Vec<InterventionPair>,
    /// Accepted pairs only, in input order.
    pub accepted: Vec<InterventionPair>,
    pub log: Vec<CurationDecision>,
}

/// Applies accept/reject decisions to pending pairs. Pairs without a
/// decision stay pending and are left out of `accepted`.
pub fn curate(
    pairs: &[InterventionPair],
    decisions: &[CurationDecision],
) -> Result<CurationOutcome, CurationError> {
    let index: HashMap<&str, usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.original_id.as_str(), i))
        .collect();
    let mut verdicts: BTreeMap<usize, Verdict> = BTreeMap::new();
    for d in decisions {
        let &i = index
            .get(d.original_id.as_str())
            .ok_or_else(|| CurationError::UnknownId(d.original_id.clone()))?;
        if pairs[i].curation != CurationStatus::Pending {
            return Err(CurationError::NotPending(d.original_id.clone()));
        }
        if verdicts.insert(i, d.verdict).is_some() {
            return Err(CurationError::DoubleDecision(d.original_id.clone()));
        }
    }
    let all: Vec<InterventionPair> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = p.clone();
            p.curation = match verdicts.get(&i) {
                Some(Verdict::Accept) => CurationStatus::Accepted,
                Some(Verdict::Reject) => CurationStatus::Rejected,
                None => p.curation,
            };
            p
        })
        .collect();
    let accepted = all
        .iter()
        .filter(|p| p.curation == CurationStatus::Accepted)
        .cloned()
        .collect();
    Ok(CurationOutcome {
        all,
        accepted,
        log: decisions.to_vec(),
    })
}

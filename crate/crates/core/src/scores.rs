//! Preference and reasoner objectives evaluated on log-probabilities and
//! logits, plus the leakage-adjusted simulatability (LAS) metric.
//!
//! Nothing here computes gradients; these are the objective values only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ChainRole;

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_LABEL: i8 = -1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScoreError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("ranking label must be -1 or +1, got {0}")]
    InvalidLabel(i8),
    #[error("objective weights must be non-negative with at least one positive, got {0:?}")]
    InvalidWeights([f64; 3]),
    #[error("answer logits are missing options: {}", .0.join(", "))]
    MissingOptions(Vec<String>),
    #[error("simulator records do not pair up: {0}")]
    Pairing(String),
    #[error("no items to score")]
    Empty,
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `β · (log π(r|x) − log π_ref(r|x))`.
pub fn implicit_reward(lp_policy: f64, lp_ref: f64, beta: f64) -> f64 {
    beta * (lp_policy - lp_ref)
}

/// Probability that the preferred chain wins: `σ(f_w − f_l)`.
pub fn preference_prob(f_w: f64, f_l: f64) -> f64 {
    sigmoid(f_w - f_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScoreInput {
    pub lp_policy_w: f64,
    pub lp_policy_l: f64,
    pub lp_ref_w: f64,
    pub lp_ref_l: f64,
    pub beta: f64,
}

impl PreferenceScoreInput {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ScoreError::InvalidBeta(self.beta));
        }
        Ok(())
    }

    /// Log-probabilities above zero cannot come from a normalized model.
    pub fn unnormalized(&self) -> bool {
        [self.lp_policy_w, self.lp_policy_l, self.lp_ref_w, self.lp_ref_l]
            .iter()
            .any(|lp| *lp > 0.0)
    }

    pub fn rewards(&self) -> (f64, f64) {
        (
            implicit_reward(self.lp_policy_w, self.lp_ref_w, self.beta),
            implicit_reward(self.lp_policy_l, self.lp_ref_l, self.beta),
        )
    }
}

/// `−log σ(f_w − f_l)`, evaluated as `softplus(−(f_w − f_l))`.
pub fn dpo_loss(input: &PreferenceScoreInput) -> Result<f64, ScoreError> {
    input.validate()?;
    let (f_w, f_l) = input.rewards();
    Ok(softplus(-(f_w - f_l)))
}

/// `−log P(y_w | x, r_w)`.
pub fn lm_loss(lp_answer: f64) -> f64 {
    -lp_answer
}

/// `−log P(y_l | x, r_l)`: the answer implied by a counterfactual chain.
pub fn counterfactual_loss(lp_counter_answer: f64) -> f64 {
    -lp_counter_answer
}

/// `h(x, r_w, y_w) − h(x, r_l, y_w)`.
pub fn pairwise_logit_margin(h_w: f64, h_l: f64) -> f64 {
    h_w - h_l
}

/// `max(0, t · margin + m)`; with `t = −1` this is the usual hinge
/// rewarding `h_w ≥ h_l + m`.
pub fn margin_rank_loss(margin_value: f64, t: i8, m: f64) -> Result<f64, ScoreError> {
    if t != -1 && t != 1 {
        return Err(ScoreError::InvalidLabel(t));
    }
    Ok((f64::from(t) * margin_value + m).max(0.0))
}

/// Per-option logits for one (question, chain) input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLogits {
    pub scores: BTreeMap<String, f64>,
}

impl AnswerLogits {
    pub fn validate(&self, options: &[String]) -> Result<(), ScoreError> {
        let missing: Vec<String> = options
            .iter()
            .filter(|o| !self.scores.contains_key(*o))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ScoreError::MissingOptions(missing))
        }
    }

    pub fn get(&self, option: &str) -> Option<f64> {
        self.scores.get(option).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub lambda_lm: f64,
    pub lambda_counter: f64,
    pub lambda_pref: f64,
    pub margin: f64,
    pub label: i8,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_lm: 1.0,
            lambda_counter: 1.0,
            lambda_pref: 1.0,
            margin: DEFAULT_MARGIN,
            label: DEFAULT_LABEL,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let l = [self.lambda_lm, self.lambda_counter, self.lambda_pref];
        if l.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || l.iter().all(|x| *x == 0.0) {
            return Err(ScoreError::InvalidWeights(l));
        }
        if self.label != -1 && self.label != 1 {
            return Err(ScoreError::InvalidLabel(self.label));
        }
        Ok(())
    }
}

/// `λ_LM·L_LM + λ_counter·L_counter + λ_PREF·L_PREF`.
pub fn combined_objective(w: &ObjectiveWeights, lm: f64, counter: f64, pref: f64) -> Result<f64, ScoreError> {
    w.validate()?;
    Ok(w.lambda_lm * lm + w.lambda_counter * counter + w.lambda_pref * pref)
}

/// How token log-probabilities are reduced to a sequence score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub fn apply(self, token_logprobs: &[f64]) -> f64 {
        let total: f64 = token_logprobs.iter().sum();
        match self {
            Reduction::Sum => total,
            Reduction::Mean if token_logprobs.is_empty() => 0.0,
            Reduction::Mean => total / token_logprobs.len() as f64,
        }
    }
}

/// One line of a precomputed log-probability file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobRecord {
    pub problem_id: String,
    pub role: ChainRole,
    #[serde(default)]
    pub sample_index: u32,
    pub lp_policy: f64,
    pub lp_ref: f64,
    /// Reasoner log-probability of the chain's answer, `log P(y | x, r)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lp_answer: Option<f64>,
    /// Reasoner logit `h(x, r, y_w)` for the gold answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_logit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub problem_id: String,
    pub negative_role: ChainRole,
    pub f_w: f64,
    pub f_l: f64,
    pub preference_prob: f64,
    pub dpo_loss: f64,
    /// Reasoner objective, when the records carry answer scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unnormalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub pairs: u64,
    pub beta: f64,
    pub mean_dpo_loss: f64,
    pub mean_preference_prob: f64,
    /// Fraction of pairs with `f_w > f_l`.
    pub preference_accuracy: f64,
    pub mean_reward_w: f64,
    pub mean_reward_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_objective: Option<f64>,
}

pub fn score_pair(problem_id: &str, negative_role: ChainRole, input: &PreferenceScoreInput) -> Result<PairScore, ScoreError> {
    let loss = dpo_loss(input)?;
    let (f_w, f_l) = input.rewards();
    Ok(PairScore {
        problem_id: problem_id.to_string(),
        negative_role,
        f_w,
        f_l,
        preference_prob: preference_prob(f_w, f_l),
        dpo_loss: loss,
        objective: None,
        unnormalized: input.unnormalized(),
    })
}

/// Reasoner objective for one (factual, counterfactual) record pair: the
/// answer LM loss, the counterfactual answer loss and the ranking hinge on
/// the gold-answer logits. `None` unless every ingredient is present.
pub fn reasoner_objective(
    w: &LogprobRecord,
    l: &LogprobRecord,
    weights: &ObjectiveWeights,
) -> Result<Option<f64>, ScoreError> {
    if l.role != ChainRole::Counterfactual {
        return Ok(None);
    }
    let (Some(lp_w), Some(lp_l), Some(h_w), Some(h_l)) = (w.lp_answer, l.lp_answer, w.answer_logit, l.answer_logit)
    else {
        return Ok(None);
    };
    let pref = margin_rank_loss(pairwise_logit_margin(h_w, h_l), weights.label, weights.margin)?;
    combined_objective(weights, lm_loss(lp_w), counterfactual_loss(lp_l), pref).map(Some)
}

/// Pairs every factual record with every negative record of the same
/// problem, in file order, and scores each pair.
pub fn score_logprob_records(
    records: &[LogprobRecord],
    beta: f64,
    weights: &ObjectiveWeights,
) -> Result<Vec<PairScore>, ScoreError> {
    let mut by_problem: BTreeMap<&str, (Vec<&LogprobRecord>, Vec<&LogprobRecord>)> = BTreeMap::new();
    for r in records {
        let entry = by_problem.entry(r.problem_id.as_str()).or_default();
        if r.role == ChainRole::Factual {
            entry.0.push(r);
        } else {
            entry.1.push(r);
        }
    }
    let mut out = Vec::new();
    for (id, (wins, losses)) in by_problem {
        for w in &wins {
            for l in &losses {
                let input = PreferenceScoreInput {
                    lp_policy_w: w.lp_policy,
                    lp_policy_l: l.lp_policy,
                    lp_ref_w: w.lp_ref,
                    lp_ref_l: l.lp_ref,
                    beta,
                };
                let mut score = score_pair(id, l.role, &input)?;
                score.objective = reasoner_objective(w, l, weights)?;
                out.push(score);
            }
        }
    }
    Ok(out)
}

pub fn summarize(scores: &[PairScore], beta: f64) -> Result<ScoreSummary, ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::Empty);
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&PairScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(ScoreSummary {
        pairs: scores.len() as u64,
        beta,
        mean_dpo_loss: mean(|s| s.dpo_loss),
        mean_preference_prob: mean(|s| s.preference_prob),
        preference_accuracy: scores.iter().filter(|s| s.f_w > s.f_l).count() as f64 / n,
        mean_reward_w: mean(|s| s.f_w),
        mean_reward_l: mean(|s| s.f_l),
        mean_objective: {
            let objs: Vec<f64> = scores.iter().filter_map(|s| s.objective).collect();
            (!objs.is_empty()).then(|| objs.iter().sum::<f64>() / objs.len() as f64)
        },
    })
}

/// Whether the simulator reproduced the evaluated model's prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatorRecord {
    pub problem_id: String,
    pub matches_prediction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LasResult {
    pub las: f64,
    pub n: u64,
    pub matches_with: u64,
    pub matches_without: u64,
}

/// `Acc(qr → a') − Acc(q → a')`, both passes graded against the evaluated
/// model's own predictions and paired on problem id.
pub fn las(with_rationale: &[SimulatorRecord], without: &[SimulatorRecord]) -> Result<LasResult, ScoreError> {
    let index = |rs: &[SimulatorRecord], which: &str| {
        let mut m = BTreeMap::new();
        for r in rs {
            if m.insert(r.problem_id.clone(), r.matches_prediction).is_some() {
                return Err(ScoreError::Pairing(format!("duplicate `{}` in {which} pass", r.problem_id)));
            }
        }
        Ok(m)
    };
    let a = index(with_rationale, "with-rationale")?;
    let b = index(without, "without-rationale")?;
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        let only: Vec<&String> = a
            .keys()
            .filter(|k| !b.contains_key(*k))
            .chain(b.keys().filter(|k| !a.contains_key(*k)))
            .collect();
        return Err(ScoreError::Pairing(format!("unpaired ids {only:?}")));
    }
    if a.is_empty() {
        return Err(ScoreError::Empty);
    }
    let n = a.len() as u64;
    let mw = a.values().filter(|x| **x).count() as u64;
    let mo = b.values().filter(|x| **x).count() as u64;
    Ok(LasResult {
        las: (mw as i64 - mo as i64) as f64 / n as f64,
        n,
        matches_with: mw,
        matches_without: mo,
    })
}

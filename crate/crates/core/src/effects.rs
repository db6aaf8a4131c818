//! Potential-outcome tables and the mediation quantities computed from them:
//! indirect/direct effects, answer flip rates and paired permutation tests.
//!
//! Three cells are evaluated per item: `X0R0` (original question, its own
//! chain), `X0R1` (original question, counterfactual chain) and `X1R0`
//! (intervened question, original chain, graded against the intervened gold).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{extract_for, grade, KindMismatch};
use crate::model::{Answer, Problem};
use crate::prompt::RenderedPrompt;

pub const DEFAULT_RESAMPLES: u64 = 10_000;
pub const DEFAULT_SEED: u64 = 20_240_229;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    X0R0,
    X0R1,
    X1R0,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::X0R0, Condition::X0R1, Condition::X1R0];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectMode {
    Natural,
    Controlled,
}

impl EffectMode {
    pub fn ie_label(self) -> &'static str {
        match self {
            EffectMode::Natural => "NIE",
            EffectMode::Controlled => "CIE",
        }
    }

    pub fn de_label(self) -> &'static str {
        match self {
            EffectMode::Natural => "NDE",
            EffectMode::Controlled => "CDE",
        }
    }
}

impl fmt::Display for EffectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectMode::Natural => "natural",
            EffectMode::Controlled => "controlled",
        })
    }
}

/// One graded answer in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub problem_id: String,
    pub condition: Condition,
    /// Extracted answer; `None` when extraction failed.
    pub answer: Option<Answer>,
    pub extracted: bool,
    pub correct: bool,
    /// Model that produced the answer.
    pub model: String,
    /// Model that produced the conditioning chain.
    pub chain_generator: String,
}

/// Prompt asking for an answer given a question and a fixed chain.
pub fn render_outcome_prompt(problem: &Problem, chain_text: &str) -> RenderedPrompt {
    let mut q = problem.question.clone();
    for (label, text) in &problem.options {
        q.push_str(&format!(" ({label}) {text}"));
    }
    RenderedPrompt::new(format!("Question: {q}\nReasoning: {chain_text}\nAnswer:"))
}

/// Extracts and grades a completion. `graded_against` supplies the gold:
/// pass the intervened problem for `X1R0`.
pub fn grade_outcome(
    graded_against: &Problem,
    condition: Condition,
    completion: &str,
    model: &str,
    chain_generator: &str,
) -> Result<OutcomeRecord, KindMismatch> {
    let extracted = extract_for(graded_against, completion);
    let correct = grade(&extracted, &graded_against.gold)?.is_correct();
    Ok(OutcomeRecord {
        problem_id: graded_against.id.clone(),
        condition,
        extracted: extracted.is_ok(),
        answer: extracted.answer,
        correct,
        model: model.to_string(),
        chain_generator: chain_generator.to_string(),
    })
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EffectError {
    #[error("duplicate record for `{problem_id}` in cell {condition}")]
    Duplicate { problem_id: String, condition: Condition },
    #[error("record for `{problem_id}` filed under {found} but supplied for {expected}")]
    WrongCell {
        problem_id: String,
        expected: Condition,
        found: Condition,
    },
    #[error("no problem has records in all three cells")]
    EmptyIntersection,
    #[error("no item was extracted in both cells")]
    NoEligibleItems,
    #[error("paired vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("paired vectors are empty")]
    Empty,
    #[error("{mode} mode expects chains from `{expected}`, found `{found}` for `{problem_id}`")]
    ModeMismatch {
        mode: EffectMode,
        expected: String,
        found: String,
        problem_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub problem_id: String,
    pub x0r0: OutcomeRecord,
    pub x0r1: OutcomeRecord,
    pub x1r0: OutcomeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    /// Complete items, ordered by problem id.
    pub rows: Vec<OutcomeRow>,
    /// Ids present in some but not all cells.
    pub dropped: Vec<String>,
}

impl OutcomeTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn correct_counts(&self) -> [u64; 3] {
        let count = |f: fn(&OutcomeRow) -> bool| self.rows.iter().filter(|r| f(r)).count() as u64;
        [count(|r| r.x0r0.correct), count(|r| r.x0r1.correct), count(|r| r.x1r0.correct)]
    }

    pub fn correctness(&self, condition: Condition) -> Vec<bool> {
        self.rows
            .iter()
            .map(|r| match condition {
                Condition::X0R0 => r.x0r0.correct,
                Condition::X0R1 => r.x0r1.correct,
                Condition::X1R0 => r.x1r0.correct,
            })
            .collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &OutcomeRecord> {
        self.rows.iter().flat_map(|r| [&r.x0r0, &r.x0r1, &r.x1r0])
    }
}

fn index_cell(
    records: &[OutcomeRecord],
    expected: Condition,
) -> Result<BTreeMap<&str, &OutcomeRecord>, EffectError> {
    let mut m = BTreeMap::new();
    for r in records {
        if r.condition != expected {
            return Err(EffectError::WrongCell {
                problem_id: r.problem_id.clone(),
                expected,
                found: r.condition,
            });
        }
        if m.insert(r.problem_id.as_str(), r).is_some() {
            return Err(EffectError::Duplicate {
                problem_id: r.problem_id.clone(),
                condition: expected,
            });
        }
    }
    Ok(m)
}

/// Joins the three cells on problem id; incomplete items are dropped from
/// every cell and reported.
pub fn build_outcome_table(
    x0r0: &[OutcomeRecord],
    x0r1: &[OutcomeRecord],
    x1r0: &[OutcomeRecord],
) -> Result<OutcomeTable, EffectError> {
    let a = index_cell(x0r0, Condition::X0R0)?;
    let b = index_cell(x0r1, Condition::X0R1)?;
    let c = index_cell(x1r0, Condition::X1R0)?;
    let all: BTreeSet<&str> = a.keys().chain(b.keys()).chain(c.keys()).copied().collect();
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for id in all {
        match (a.get(id), b.get(id), c.get(id)) {
            (Some(r00), Some(r01), Some(r10)) => rows.push(OutcomeRow {
                problem_id: id.to_string(),
                x0r0: (*r00).clone(),
                x0r1: (*r01).clone(),
                x1r0: (*r10).clone(),
            }),
            _ => dropped.push(id.to_string()),
        }
    }
    if rows.is_empty() {
        return Err(EffectError::EmptyIntersection);
    }
    Ok(OutcomeTable { rows, dropped })
}

/// Splits a flat record list by cell, then joins.
pub fn table_from_records(records: &[OutcomeRecord]) -> Result<OutcomeTable, EffectError> {
    let by = |c: Condition| records.iter().filter(|r| r.condition == c).cloned().collect::<Vec<_>>();
    build_outcome_table(&by(Condition::X0R0), &by(Condition::X0R1), &by(Condition::X1R0))
}

fn ratio(num: i64, n: usize) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(n as i64))
}

/// `acc(X0R0) − acc(X0R1)` as an exact rational.
pub fn indirect_effect_exact(table: &OutcomeTable) -> BigRational {
    let [c00, c01, _] = table.correct_counts();
    ratio(c00 as i64 - c01 as i64, table.len())
}

/// `acc(X0R0) − acc(X1R0)` as an exact rational.
pub fn direct_effect_exact(table: &OutcomeTable) -> BigRational {
    let [c00, _, c10] = table.correct_counts();
    ratio(c00 as i64 - c10 as i64, table.len())
}

pub fn indirect_effect(table: &OutcomeTable) -> f64 {
    indirect_effect_exact(table).to_f64().unwrap_or(f64::NAN)
}

pub fn direct_effect(table: &OutcomeTable) -> f64 {
    direct_effect_exact(table).to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipRate {
    pub rate: f64,
    pub flipped: u64,
    /// Items extracted in both `X0R0` and `X0R1`.
    pub eligible: u64,
}

/// Fraction of items whose `X0R1` answer differs from the `X0R0` answer,
/// over items with a successful extraction in both cells.
pub fn flip_rate(table: &OutcomeTable) -> Result<FlipRate, EffectError> {
    let eligible: Vec<&OutcomeRow> = table
        .rows
        .iter()
        .filter(|r| r.x0r0.extracted && r.x0r1.extracted)
        .collect();
    if eligible.is_empty() {
        return Err(EffectError::NoEligibleItems);
    }
    let flipped = eligible.iter().filter(|r| r.x0r0.answer != r.x0r1.answer).count() as u64;
    let n = eligible.len() as u64;
    Ok(FlipRate {
        rate: flipped as f64 / n as f64,
        flipped,
        eligible: n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMethod {
    /// Exhaustive when `2^n <= resamples`, Monte-Carlo otherwise.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub p_value: f64,
    pub exhaustive: bool,
    pub resamples: u64,
}

/// Two-sided paired sign-flip test for `mean(a) − mean(b)`.
///
/// Monte-Carlo estimates count the observed statistic (`(1 + hits) / (R + 1)`).
pub fn permutation_pvalue(
    a: &[bool],
    b: &[bool],
    resamples: u64,
    seed: u64,
    method: PermutationMethod,
) -> Result<PermutationResult, EffectError> {
    if a.len() != b.len() {
        return Err(EffectError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EffectError::Empty);
    }
    let diffs: Vec<i64> = a.iter().zip(b).map(|(&x, &y)| x as i64 - y as i64).collect();
    let observed = diffs.iter().sum::<i64>().abs();
    let nonzero = diffs.iter().filter(|d| **d != 0).count() as u64;
    let exhaustive = match method {
        PermutationMethod::Exact => true,
        PermutationMethod::MonteCarlo => false,
        PermutationMethod::Auto => a.len() < 64 && (1u64 << a.len()) <= resamples,
    };
    if exhaustive {
        return Ok(PermutationResult {
            p_value: exact_sign_flip(nonzero, observed),
            exhaustive: true,
            resamples: 0,
        });
    }
    let resamples = resamples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..resamples {
        let mut s = 0i64;
        for _ in 0..nonzero {
            s += if rng.random::<bool>() { 1 } else { -1 };
        }
        if s.abs() >= observed {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        p_value: (1 + hits) as f64 / (resamples + 1) as f64,
        exhaustive: false,
        resamples,
    })
}

/// Every nonzero difference is ±1, so under the sign-flip null the statistic
/// is `|m − 2j|` with `j ~ Binomial(m, 1/2)`; zeros contribute nothing.
fn exact_sign_flip(m: u64, observed: i64) -> f64 {
    let mut hits = BigInt::zero();
    let mut binom = BigInt::from(1);
    for j in 0..=m {
        if (m as i64 - 2 * j as i64).abs() >= observed {
            hits += &binom;
        }
        binom = binom * BigInt::from(m - j) / BigInt::from(j + 1);
    }
    let total = BigInt::from(1) << m;
    BigRational::new(hits, total).to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    pub resamples: u64,
    pub seed: u64,
    pub method: PermutationMethod,
    /// Chain generator required in controlled mode; any single generator
    /// other than the evaluated model is accepted when unset.
    pub controller: Option<String>,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: DEFAULT_SEED,
            method: PermutationMethod::Auto,
            controller: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub task: String,
    pub model: String,
    pub mode: EffectMode,
    pub n: u64,
    pub correct_x0r0: u64,
    pub correct_x0r1: u64,
    pub correct_x1r0: u64,
    pub acc_x0r0: f64,
    pub acc_x0r1: f64,
    pub acc_x1r0: f64,
    pub ie: f64,
    pub de: f64,
    /// `None` when no item had an extractable answer in both X0R0 and X0R1.
    pub flip_rate: Option<f64>,
    pub flip_eligible: u64,
    pub flipped: u64,
    pub p_ie: f64,
    pub p_de: f64,
    pub seed: u64,
    pub resamples: u64,
    pub exhaustive: bool,
    pub dropped: Vec<String>,
}

fn check_mode(table: &OutcomeTable, model: &str, mode: EffectMode, cfg: &EffectConfig) -> Result<(), EffectError> {
    let mut controller = cfg.controller.clone();
    for r in table.records() {
        let expected = match mode {
            EffectMode::Natural => model.to_string(),
            EffectMode::Controlled => match &controller {
                Some(c) => c.clone(),
                None if r.chain_generator != model => {
                    controller = Some(r.chain_generator.clone());
                    continue;
                }
                None => "a controller model".to_string(),
            },
        };
        if r.chain_generator != expected {
            return Err(EffectError::ModeMismatch {
                mode,
                expected,
                found: r.chain_generator.clone(),
                problem_id: r.problem_id.clone(),
            });
        }
    }
    Ok(())
}

/// All effect quantities for one (task, model, mode) table.
pub fn compute_effects(
    table: &OutcomeTable,
    task: &str,
    model: &str,
    mode: EffectMode,
    cfg: &EffectConfig,
) -> Result<EffectReport, EffectError> {
    check_mode(table, model, mode, cfg)?;
    let n = table.len() as u64;
    let [c00, c01, c10] = table.correct_counts();
    let flips = flip_rate(table);
    let (flip_rate, flip_eligible, flipped) = match flips {
        Ok(f) => (Some(f.rate), f.eligible, f.flipped),
        Err(EffectError::NoEligibleItems) => (None, 0, 0),
        Err(e) => return Err(e),
    };
    let r00 = table.correctness(Condition::X0R0);
    let p_ie = permutation_pvalue(&r00, &table.correctness(Condition::X0R1), cfg.resamples, cfg.seed, cfg.method)?;
    let p_de = permutation_pvalue(&r00, &table.correctness(Condition::X1R0), cfg.resamples, cfg.seed, cfg.method)?;
    Ok(EffectReport {
        task: task.to_string(),
        model: model.to_string(),
        mode,
        n,
        correct_x0r0: c00,
        correct_x0r1: c01,
        correct_x1r0: c10,
        acc_x0r0: c00 as f64 / n as f64,
        acc_x0r1: c01 as f64 / n as f64,
        acc_x1r0: c10 as f64 / n as f64,
        ie: indirect_effect(table),
        de: direct_effect(table),
        flip_rate,
        flip_eligible,
        flipped,
        p_ie: p_ie.p_value,
        p_de: p_de.p_value,
        seed: cfg.seed,
        resamples: p_ie.resamples,
        exhaustive: p_ie.exhaustive,
        dropped: table.dropped.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, c: Condition, ans: Option<bool>, correct: bool) -> OutcomeRecord {
        OutcomeRecord {
            problem_id: id.into(),
            condition: c,
            answer: ans.map(Answer::Binary),
            extracted: ans.is_some(),
            correct,
            model: "m".into(),
            chain_generator: "m".into(),
        }
    }

    fn table(c00: &[bool], c01: &[bool], c10: &[bool]) -> OutcomeTable {
        let cell = |c: Condition, v: &[bool]| {
            v.iter()
                .enumerate()
                .map(|(i, &x)| rec(&format!("q{i:02}"), c, Some(x), x))
                .collect::<Vec<_>>()
        };
        build_outcome_table(
            &cell(Condition::X0R0, c00),
            &cell(Condition::X0R1, c01),
            &cell(Condition::X1R0, c10),
        )
        .unwrap()
    }

    #[test]
    fn drops_incomplete_items() {
        let t = table(&[true; 10], &[true; 10], &[true; 10]);
        assert_eq!((t.len(), t.dropped.len()), (10, 0));
        let a: Vec<_> = (0..10).map(|i| rec(&format!("q{i}"), Condition::X0R0, Some(true), true)).collect();
        let c: Vec<_> = (0..10)
            .filter(|i| *i != 7)
            .map(|i| rec(&format!("q{i}"), Condition::X1R0, Some(true), true))
            .collect();
        let b: Vec<_> = (0..10).map(|i| rec(&format!("q{i}"), Condition::X0R1, Some(true), true)).collect();
        let t = build_outcome_table(&a, &b, &c).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t.dropped, vec!["q7"]);
    }

    #[test]
    fn duplicates_and_empty_are_errors() {
        let a = vec![rec("q3", Condition::X0R0, Some(true), true); 2];
        assert!(matches!(build_outcome_table(&a, &[], &[]), Err(EffectError::Duplicate { .. })));
        let a = vec![rec("q1", Condition::X0R0, Some(true), true)];
        assert_eq!(build_outcome_table(&a, &[], &[]), Err(EffectError::EmptyIntersection));
    }

    #[test]
    fn effects_from_counts() {
        let t = table(&[true; 10], &[false; 10], &[true; 10]);
        assert_eq!(indirect_effect(&t), 1.0);
        assert_eq!(direct_effect(&t), 0.0);
        let mut lo = [false; 10];
        lo[0] = true;
        let t = table(&[false; 10], &[false; 10], &lo);
        assert!(direct_effect(&t) < 0.0);
    }

    #[test]
    fn flip_rate_skips_failed_extractions() {
        let mut t = table(&[true; 4], &[true, false, true, true], &[true; 4]);
        assert_eq!(flip_rate(&t).unwrap().rate, 0.25);
        t.rows[1].x0r1.extracted = false;
        t.rows[1].x0r1.answer = None;
        let f = flip_rate(&t).unwrap();
        assert_eq!((f.flipped, f.eligible), (0, 3));
        for r in &mut t.rows {
            r.x0r0.extracted = false;
        }
        assert_eq!(flip_rate(&t), Err(EffectError::NoEligibleItems));
    }

    #[test]
    fn exact_pvalue_small_fixture() {
        let a = [true, true, true, true, false];
        let b = [false, false, true, false, false];
        let r = permutation_pvalue(&a, &b, DEFAULT_RESAMPLES, DEFAULT_SEED, PermutationMethod::Auto).unwrap();
        assert!(r.exhaustive);
        assert_eq!(r.p_value, 0.25);
        let same = permutation_pvalue(&a, &a, 100, 1, PermutationMethod::MonteCarlo).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert!(permutation_pvalue(&a, &b[..4], 10, 1, PermutationMethod::Auto).is_err());
    }

    #[test]
    fn mode_check() {
        let t = table(&[true; 3], &[true; 3], &[true; 3]);
        let cfg = EffectConfig::default();
        compute_effects(&t, "t", "m", EffectMode::Natural, &cfg).unwrap();
        assert!(matches!(
            compute_effects(&t, "t", "m", EffectMode::Controlled, &cfg),
            Err(EffectError::ModeMismatch { .. })
        ));
        assert!(compute_effects(&t, "t", "other", EffectMode::Natural, &cfg).is_err());
    }
}

//! Shared domain types: problems, answers, model specs, chains and
//! preference pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("field `{field}`: {reason}")]
    Schema { field: &'static str, reason: String },
    #[error("duplicate problem id `{0}`")]
    DuplicateId(String),
    #[error("duplicate chain key {0:?}")]
    DuplicateChain(ChainKey),
    #[error("invalid preference pair for `{problem_id}`: {reason}")]
    PreferencePair { problem_id: String, reason: String },
}

fn schema(field: &'static str, reason: impl Into<String>) -> ValidationError {
    ValidationError::Schema {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Mcqa,
    Numeric,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Mcqa => "mcqa",
            TaskKind::Numeric => "numeric",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(TaskKind::Binary),
            "mcqa" => Ok(TaskKind::Mcqa),
            "numeric" => Ok(TaskKind::Numeric),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecimalError {
    #[error("`{0}` is not a decimal number")]
    Syntax(String),
    #[error("{0} has no finite decimal expansion")]
    NonTerminating(BigRational),
}

/// An exact decimal number.
///
/// Stored as a rational whose denominator only has the prime factors 2 and 5,
/// so every value has a finite canonical decimal rendering: integers print
/// without a fraction, other values with the shortest exact fraction.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal(BigRational);

impl Decimal {
    pub fn from_rational(value: BigRational) -> Result<Self, DecimalError> {
        let mut d = value.denom().clone();
        let two = BigInt::from(2);
        let five = BigInt::from(5);
        while (&d % &two).is_zero() {
            d /= &two;
        }
        while (&d % &five).is_zero() {
            d /= &five;
        }
        if d == BigInt::from(1) {
            Ok(Decimal(value))
        } else {
            Err(DecimalError::NonTerminating(value))
        }
    }

    pub fn from_i64(v: i64) -> Self {
        Decimal(BigRational::from_integer(BigInt::from(v)))
    }

    pub fn as_rational(&self) -> &BigRational {
        &self.0
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn to_f64(&self) -> Option<f64> {
        self.0.to_f64()
    }
}

impl FromStr for Decimal {
    type Err = DecimalError;

    /// Accepts an optional sign, digits with optional `,` thousands
    /// separators, and an optional fractional part (`12`, `-3.50`, `1,234.5`,
    /// `.5`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DecimalError::Syntax(s.to_string());
        let t = s.trim();
        let (neg, body) = match t.as_bytes().first() {
            Some(b'-') => (true, &t[1..]),
            Some(b'+') => (false, &t[1..]),
            _ => (false, t),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if body.ends_with('.') && frac_part.is_empty() && int_part.is_empty() {
            return Err(err());
        }
        let int_digits: String = if int_part.contains(',') {
            let groups: Vec<&str> = int_part.split(',').collect();
            let first_ok = (1..=3).contains(&groups[0].len());
            let rest_ok = groups[1..].iter().all(|g| g.len() == 3);
            if !first_ok || !rest_ok {
                return Err(err());
            }
            groups.concat()
        } else {
            int_part.to_string()
        };
        if !int_digits.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(err());
        }
        let digits = format!("{int_digits}{frac_part}");
        let digits = if digits.is_empty() { "0".to_string() } else { digits };
        let numer: BigInt = digits.parse().map_err(|_| err())?;
        let denom = num::pow(BigInt::from(10), frac_part.len());
        let mut value = BigRational::new(numer, denom);
        if neg {
            value = -value;
        }
        Ok(Decimal(value))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = &self.0;
        if value.is_zero() {
            return f.write_str("0");
        }
        if value.is_integer() {
            return write!(f, "{}", value.numer());
        }
        // The denominator divides 10^k for the smallest such k.
        let mut k = 0usize;
        let mut scale = BigInt::from(1);
        while !(&scale % value.denom()).is_zero() {
            scale *= 10;
            k += 1;
        }
        let scaled = (value.numer() * &scale) / value.denom();
        let sign = if scaled.is_negative() { "-" } else { "" };
        let mut digits = scaled.abs().to_string();
        if digits.len() <= k {
            digits = format!("{}{}", "0".repeat(k + 1 - digits.len()), digits);
        }
        let (int, frac) = digits.split_at(digits.len() - k);
        let frac = frac.trim_end_matches('0');
        write!(f, "{sign}{int}.{frac}")
    }
}

impl fmt::Debug for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Decimal({self})")
    }
}

impl Serialize for Decimal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A canonical answer value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAnswer", into = "RawAnswer")]
pub enum Answer {
    Binary(bool),
    Choice(String),
    Numeric(Decimal),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerError {
    #[error("`{value}` is not a valid {kind} answer")]
    Invalid { kind: TaskKind, value: String },
}

impl Answer {
    /// Parses and canonicalizes a raw answer string for the given task kind.
    pub fn parse(kind: TaskKind, raw: &str) -> Result<Self, AnswerError> {
        let invalid = || AnswerError::Invalid {
            kind,
            value: raw.to_string(),
        };
        let t = raw.trim();
        match kind {
            TaskKind::Binary => match t.to_ascii_lowercase().as_str() {
                "yes" | "true" => Ok(Answer::Binary(true)),
                "no" | "false" => Ok(Answer::Binary(false)),
                _ => Err(invalid()),
            },
            TaskKind::Mcqa => {
                let inner = t
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .unwrap_or(t)
                    .trim();
                if inner.is_empty() || inner.chars().any(char::is_whitespace) {
                    return Err(invalid());
                }
                Ok(Answer::Choice(inner.to_lowercase()))
            }
            TaskKind::Numeric => {
                let t = t.strip_prefix('$').unwrap_or(t);
                t.parse::<Decimal>().map(Answer::Numeric).map_err(|_| invalid())
            }
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Answer::Binary(_) => TaskKind::Binary,
            Answer::Choice(_) => TaskKind::Mcqa,
            Answer::Numeric(_) => TaskKind::Numeric,
        }
    }

    pub fn value(&self) -> String {
        match self {
            Answer::Binary(true) => "yes".to_string(),
            Answer::Binary(false) => "no".to_string(),
            Answer::Choice(label) => label.clone(),
            Answer::Numeric(d) => d.to_string(),
        }
    }

    /// The flipped answer of a binary question.
    pub fn negated(&self) -> Option<Answer> {
        match self {
            Answer::Binary(b) => Some(Answer::Binary(!b)),
            _ => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value())
    }
}

#[derive(Serialize, Deserialize)]
struct RawAnswer {
    kind: TaskKind,
    value: String,
}

impl TryFrom<RawAnswer> for Answer {
    type Error = AnswerError;

    fn try_from(raw: RawAnswer) -> Result<Self, Self::Error> {
        Answer::parse(raw.kind, &raw.value)
    }
}

impl From<Answer> for RawAnswer {
    fn from(a: Answer) -> Self {
        RawAnswer {
            kind: a.kind(),
            value: a.value(),
        }
    }
}

/// One problem record as it appears in the problem JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProblem {
    pub id: String,
    pub task: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<(String, String)>>,
    pub gold: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, serde_json::Value>>,
}

/// A validated reasoning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct Problem {
    pub id: String,
    pub task_kind: TaskKind,
    pub question: String,
    /// `(label, text)` pairs; labels are lowercased. Empty unless mcqa.
    pub options: Vec<(String, String)>,
    pub gold: Answer,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Problem {
    pub fn option_labels(&self) -> Vec<&str> {
        self.options.iter().map(|(l, _)| l.as_str()).collect()
    }
}

impl TryFrom<RawProblem> for Problem {
    type Error = ValidationError;

    fn try_from(raw: RawProblem) -> Result<Self, Self::Error> {
        validate_problem(raw)
    }
}

impl From<Problem> for RawProblem {
    fn from(p: Problem) -> Self {
        RawProblem {
            id: p.id,
            task: p.task_kind.to_string(),
            question: p.question,
            options: (!p.options.is_empty()).then_some(p.options),
            gold: serde_json::Value::String(p.gold.value()),
            meta: (!p.meta.is_empty()).then_some(p.meta),
        }
    }
}

/// Validates one raw problem record and canonicalizes its answer.
pub fn validate_problem(raw: RawProblem) -> Result<Problem, ValidationError> {
    if raw.id.trim().is_empty() {
        return Err(schema("id", "must be a non-empty string"));
    }
    let task_kind: TaskKind = raw.task.parse().map_err(|e: String| schema("task", e))?;
    if raw.question.trim().is_empty() {
        return Err(schema("question", "must be non-empty"));
    }
    let gold_text = match &raw.gold {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => n.to_string(),
        serde_json::Value::Bool(true) => "yes".to_string(),
        serde_json::Value::Bool(false) => "no".to_string(),
        other => return Err(schema("gold", format!("unsupported value {other}"))),
    };
    let raw_options = raw.options.unwrap_or_default();
    let options = match task_kind {
        TaskKind::Binary | TaskKind::Numeric => {
            if !raw_options.is_empty() {
                return Err(schema(
                    "options",
                    format!("must be empty for {task_kind} problems"),
                ));
            }
            Vec::new()
        }
        TaskKind::Mcqa => {
            if raw_options.len() < 2 {
                return Err(schema("options", "mcqa problems need at least 2 options"));
            }
            let mut seen = HashSet::new();
            let mut options = Vec::with_capacity(raw_options.len());
            for (label, text) in raw_options {
                let label = match Answer::parse(TaskKind::Mcqa, &label) {
                    Ok(Answer::Choice(l)) => l,
                    _ => return Err(schema("options", format!("invalid label `{label}`"))),
                };
                if !seen.insert(label.clone()) {
                    return Err(schema("options", format!("duplicate label `{label}`")));
                }
                options.push((label, text));
            }
            options
        }
    };
    let gold = Answer::parse(task_kind, &gold_text).map_err(|e| schema("gold", e.to_string()))?;
    if let Answer::Choice(label) = &gold {
        if !options.iter().any(|(l, _)| l == label) {
            return Err(schema(
                "gold",
                format!("`{label}` is not among the option labels"),
            ));
        }
    }
    Ok(Problem {
        id: raw.id,
        task_kind,
        question: raw.question,
        options,
        gold,
        meta: raw.meta.unwrap_or_default(),
    })
}

/// Validates a batch and rejects duplicate ids.
pub fn validate_problems(
    raws: impl IntoIterator<Item = RawProblem>,
) -> Result<Vec<Problem>, ValidationError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for raw in raws {
        let p = validate_problem(raw)?;
        if !seen.insert(p.id.clone()) {
            return Err(ValidationError::DuplicateId(p.id));
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
            top_p: 1.0,
            seed: None,
        }
    }
}

/// A model under a fixed endpoint and decoding configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub endpoint: String,
    pub decoding: Decoding,
}

impl ModelSpec {
    pub fn new(model_id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            decoding: Decoding::default(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.decoding.temperature = temperature;
        self
    }

    pub fn id(&self) -> &str {
        &self.model_id
    }

    /// Temperature 0 asks the endpoint for greedy, seeded decoding.
    pub fn is_deterministic(&self) -> bool {
        self.decoding.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let d = &self.decoding;
        if self.model_id.trim().is_empty() {
            return Err(schema("model_id", "must be non-empty"));
        }
        if !(d.temperature.is_finite() && d.temperature >= 0.0) {
            return Err(schema("temperature", "must be a finite value >= 0"));
        }
        if d.max_tokens == 0 {
            return Err(schema("max_tokens", "must be positive"));
        }
        if !(d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(schema("top_p", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainRole {
    Factual,
    Counterfactual,
    Irrelevant,
}

impl fmt::Display for ChainRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainRole::Factual => "factual",
            ChainRole::Counterfactual => "counterfactual",
            ChainRole::Irrelevant => "irrelevant",
        })
    }
}

/// Where an irrelevant chain's text was borrowed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorRef {
    pub problem_id: String,
    pub role: ChainRole,
    pub prompt_digest: String,
    pub sample_index: u32,
}

/// One generated reasoning chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub problem_id: String,
    pub role: ChainRole,
    pub text: String,
    pub generator: String,
    pub prompt_digest: String,
    pub temperature: f64,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor: Option<DonorRef>,
}

pub type ChainKey = (String, ChainRole, String, String, u32);

impl Chain {
    pub fn key(&self) -> ChainKey {
        (
            self.problem_id.clone(),
            self.role,
            self.generator.clone(),
            self.prompt_digest.clone(),
            self.sample_index,
        )
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.text.trim().is_empty() {
            return Err(schema("text", "chain text must be non-empty"));
        }
        Ok(())
    }
}

/// Checks chain invariants across a run: non-empty text and unique keys.
pub fn validate_chains(chains: &[Chain]) -> Result<(), ValidationError> {
    let mut seen = HashSet::new();
    for c in chains {
        c.validate()?;
        if !seen.insert(c.key()) {
            return Err(ValidationError::DuplicateChain(c.key()));
        }
    }
    Ok(())
}

/// A preferred (factual) and dispreferred chain for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub problem_id: String,
    pub preferred: Chain,
    pub dispreferred: Chain,
    pub preferred_answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispreferred_answer: Option<Answer>,
}

impl PreferencePair {
    pub fn new(
        problem: &Problem,
        preferred: Chain,
        dispreferred: Chain,
        dispreferred_answer: Option<Answer>,
    ) -> Result<Self, ValidationError> {
        let pair = PreferencePair {
            problem_id: problem.id.clone(),
            preferred,
            dispreferred,
            preferred_answer: problem.gold.clone(),
            dispreferred_answer,
        };
        pair.validate(&problem.gold)?;
        Ok(pair)
    }

    pub fn validate(&self, gold: &Answer) -> Result<(), ValidationError> {
        let bad = |reason: &str| ValidationError::PreferencePair {
            problem_id: self.problem_id.clone(),
            reason: reason.to_string(),
        };
        if self.preferred.role != ChainRole::Factual {
            return Err(bad("preferred chain must be factual"));
        }
        if self.dispreferred.role == ChainRole::Factual {
            return Err(bad("dispreferred chain must not be factual"));
        }
        if &self.preferred_answer != gold {
            return Err(bad("preferred answer must equal the gold answer"));
        }
        if self.preferred.problem_id != self.problem_id {
            return Err(bad("preferred chain belongs to another problem"));
        }
        if self.dispreferred.problem_id != self.problem_id {
            return Err(bad("dispreferred chain belongs to another problem"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn raw(v: serde_json::Value) -> RawProblem {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn binary_gold_is_lowercased() {
        let p = validate_problem(raw(
            json!({"id":"q1","task":"binary","question":"Is it?","gold":"Yes"}),
        ))
        .unwrap();
        assert_eq!(p.gold, Answer::Binary(true));
        assert_eq!(p.gold.value(), "yes");
    }

    #[test]
    fn mcqa_gold_must_be_a_label() {
        let err = validate_problem(raw(json!({
            "id":"q2","task":"mcqa","question":"Pick",
            "options":[["a","one"],["b","two"]],"gold":"c"
        })))
        .unwrap_err();
        assert!(matches!(err, ValidationError::Schema { field: "gold", .. }), "{err}");
    }

    #[test]
    fn mcqa_rejects_duplicate_and_missing_options() {
        let dup = validate_problem(raw(json!({
            "id":"q","task":"mcqa","question":"Pick",
            "options":[["a","one"],["A","two"]],"gold":"a"
        })));
        assert!(matches!(dup, Err(ValidationError::Schema { field: "options", .. })));
        let one = validate_problem(raw(json!({
            "id":"q","task":"mcqa","question":"Pick","options":[["a","one"]],"gold":"a"
        })));
        assert!(matches!(one, Err(ValidationError::Schema { field: "options", .. })));
    }

    #[test]
    fn numeric_gold_is_canonical() {
        let p = validate_problem(raw(
            json!({"id":"q3","task":"numeric","question":"How many?","gold":"42.0"}),
        ))
        .unwrap();
        assert_eq!(p.gold.value(), "42");
        // Oracle: the canonical string parses back to the same value as the input.
        let original: Decimal = "42.0".parse().unwrap();
        let canonical: Decimal = p.gold.value().parse().unwrap();
        assert_eq!(original, canonical);
    }

    #[test]
    fn numeric_gold_accepts_json_numbers() {
        let p = validate_problem(raw(
            json!({"id":"q","task":"numeric","question":"?","gold":7.50}),
        ))
        .unwrap();
        assert_eq!(p.gold.value(), "7.5");
    }

    #[test]
    fn binary_with_options_is_rejected() {
        let err = validate_problem(raw(json!({
            "id":"q","task":"binary","question":"?","options":[["a","x"],["b","y"]],"gold":"no"
        })))
        .unwrap_err();
        assert!(matches!(err, ValidationError::Schema { field: "options", .. }));
    }

    #[test]
    fn unknown_task_names_field() {
        let err = validate_problem(raw(json!({"id":"q","task":"essay","question":"?","gold":"x"})))
            .unwrap_err();
        assert!(err.to_string().contains("task"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = raw(json!({"id":"q","task":"binary","question":"?","gold":"no"}));
        let err = validate_problems(vec![r.clone(), r]).unwrap_err();
        assert_eq!(err, ValidationError::DuplicateId("q".into()));
    }

    #[test]
    fn decimal_canonical_forms() {
        for (input, want) in [
            ("42.0", "42"),
            ("007", "7"),
            ("-0.0", "0"),
            ("3.1400", "3.14"),
            ("1,234.50", "1234.5"),
            (".5", "0.5"),
            ("-0.05", "-0.05"),
            ("+12", "12"),
        ] {
            assert_eq!(input.parse::<Decimal>().unwrap().to_string(), want, "{input}");
        }
        for bad in ["", "abc", "1,23", "1.2.3", "-", ".", "12a"] {
            assert!(bad.parse::<Decimal>().is_err(), "{bad}");
        }
    }

    #[test]
    fn non_terminating_rational_rejected() {
        let third = BigRational::new(1.into(), 3.into());
        assert!(Decimal::from_rational(third).is_err());
        let eighth = BigRational::new(1.into(), 8.into());
        assert_eq!(Decimal::from_rational(eighth).unwrap().to_string(), "0.125");
    }

    #[test]
    fn answer_serde_shape() {
        let a = Answer::parse(TaskKind::Mcqa, "(B)").unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"kind":"mcqa","value":"b"}"#);
        assert_eq!(serde_json::from_str::<Answer>(&s).unwrap(), a);
    }

    #[test]
    fn model_spec_validation() {
        let mut m = ModelSpec::new("m", "http://x");
        m.validate().unwrap();
        assert!(m.is_deterministic());
        m.decoding.top_p = 0.0;
        assert!(m.validate().is_err());
        m.decoding.top_p = 1.0;
        m.decoding.temperature = -1.0;
        assert!(m.validate().is_err());
    }

    fn chain(pid: &str, role: ChainRole, idx: u32) -> Chain {
        Chain {
            problem_id: pid.into(),
            role,
            text: "step".into(),
            generator: "g".into(),
            prompt_digest: "d".into(),
            temperature: 0.0,
            sample_index: idx,
            donor: None,
        }
    }

    #[test]
    fn chain_keys_must_be_unique() {
        let a = chain("q", ChainRole::Factual, 0);
        validate_chains(&[a.clone(), chain("q", ChainRole::Factual, 1)]).unwrap();
        assert!(matches!(
            validate_chains(&[a.clone(), a]),
            Err(ValidationError::DuplicateChain(_))
        ));
        let mut empty = chain("q", ChainRole::Factual, 0);
        empty.text = "  ".into();
        assert!(empty.validate().is_err());
    }

    #[test]
    fn preference_pair_invariants() {
        let p = validate_problem(raw(json!({"id":"q","task":"binary","question":"?","gold":"no"})))
            .unwrap();
        PreferencePair::new(
            &p,
            chain("q", ChainRole::Factual, 0),
            chain("q", ChainRole::Counterfactual, 0),
            Some(Answer::Binary(true)),
        )
        .unwrap();
        assert!(PreferencePair::new(
            &p,
            chain("q", ChainRole::Counterfactual, 0),
            chain("q", ChainRole::Irrelevant, 0),
            None,
        )
        .is_err());
        assert!(PreferencePair::new(
            &p,
            chain("q", ChainRole::Factual, 0),
            chain("q", ChainRole::Factual, 1),
            None,
        )
        .is_err());
    }

    fn arb_raw_problem() -> impl Strategy<Value = RawProblem> {
        let binary = (any::<bool>(), "[A-Za-z ]{1,20}").prop_map(|(b, q)| RawProblem {
            id: "b".into(),
            task: "binary".into(),
            question: format!("Q {q}"),
            options: None,
            gold: json!(if b { "YES" } else { " no" }),
            meta: None,
        });
        let numeric = (-100000i64..100000, 0u32..4, 0usize..3).prop_map(|(n, scale, pad)| {
            let value = n as f64 / 10f64.powi(scale as i32);
            RawProblem {
                id: "n".into(),
                task: "numeric".into(),
                question: "How many?".into(),
                options: None,
                gold: json!(format!("{value:.prec$}{}", "0".repeat(pad), prec = scale as usize)),
                meta: None,
            }
        });
        let mcqa = (2usize..6, any::<prop::sample::Index>()).prop_map(|(n, idx)| {
            let labels: Vec<String> = (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
            RawProblem {
                id: "m".into(),
                task: "mcqa".into(),
                question: "Pick".into(),
                options: Some(labels.iter().map(|l| (l.clone(), format!("opt {l}"))).collect()),
                gold: json!(format!("({})", labels[idx.index(n)])),
                meta: Some(BTreeMap::from([("src".to_string(), json!(1))])),
            }
        });
        prop_oneof![binary, numeric, mcqa]
    }

    proptest! {
        #[test]
        fn validation_is_idempotent(raw in arb_raw_problem()) {
            let once = validate_problem(raw).unwrap();
            let twice = validate_problem(RawProblem::from(once.clone())).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn answers_roundtrip_through_canonicalization(n in any::<i64>(), scale in 0u32..6) {
            let d = Decimal::from_rational(BigRational::new(n.into(), num::pow(BigInt::from(10), scale as usize))).unwrap();
            let a = Answer::Numeric(d);
            prop_assert_eq!(Answer::parse(TaskKind::Numeric, &a.value()).unwrap(), a);
        }
    }
}

//! Operand-swap interventions for arithmetic word problems.
//!
//! A problem carries its worked solution as a chain of calculator-style
//! equations in `meta.equations` (`["48/2=24", "48+24=72"]`) or embedded in
//! `meta.solution` as `<<48/2=24>>` annotations. Numbers on the left-hand
//! side that equal an earlier equation's result are treated as references to
//! that result; all other numbers are leaf operands and must occur verbatim
//! in the question text.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use num::rational::BigRational;
use num::{Signed, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CurationStatus, InterventionKind, InterventionPair, Provenance};
use crate::model::{Answer, Decimal, Problem, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SwapRejection {
    #[error("operand swaps need a numeric problem")]
    NotNumeric,
    #[error("problem has no solution equations in meta")]
    NoEquations,
    #[error("malformed equation `{0}`")]
    MalformedEquation(String),
    #[error("equation `{equation}` evaluates to {computed}, annotated as {stated}")]
    InconsistentAnnotation {
        equation: String,
        stated: String,
        computed: String,
    },
    #[error("final equation result {result} differs from gold {gold}")]
    GoldMismatch { result: String, gold: String },
    #[error("operand {0} cannot be located verbatim in the question")]
    OperandNotFound(String),
    #[error("swap map has no replacement for operand {0}")]
    IncompleteMap(String),
    #[error("swap map replaces {0}, which is not a leaf operand")]
    UnknownOperand(String),
    #[error("division by zero in equation {0}")]
    DivisionByZero(usize),
    #[error("equation {equation} yields negative intermediate {value}")]
    NegativeIntermediate { equation: usize, value: String },
    #[error("equation {equation} yields non-integer intermediate {value}")]
    NonIntegerIntermediate { equation: usize, value: String },
    #[error("result {0} has no finite decimal form")]
    NonTerminating(String),
    #[error("range [{min}, {max}] cannot supply {needed} fresh operands")]
    RangeExhausted { min: i64, max: i64, needed: usize },
}

impl SwapRejection {
    /// Rejections that depend on the drawn values; another draw may succeed.
    fn is_value_dependent(&self) -> bool {
        matches!(
            self,
            SwapRejection::DivisionByZero(_)
                | SwapRejection::NegativeIntermediate { .. }
                | SwapRejection::NonIntegerIntermediate { .. }
                | SwapRejection::NonTerminating(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwapConfig {
    /// Inclusive replacement range.
    pub min: i64,
    pub max: i64,
    /// Reject swaps that make an integer step fractional.
    pub require_integer: bool,
    /// Redraws allowed after value-dependent rejections.
    pub max_attempts: u32,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            min: 2,
            max: 99,
            require_integer: true,
            max_attempts: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Operand {
    Leaf,
    Ref(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Num { value: Decimal, operand: Operand },
    Op(char),
    Open,
    Close,
}

#[derive(Debug, Clone)]
enum Expr {
    Num(usize),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone)]
struct Equation {
    text: String,
    tokens: Vec<Token>,
    expr: Expr,
    stated: Decimal,
}

/// A parsed solution-equation chain.
#[derive(Debug, Clone)]
pub struct EquationChain {
    equations: Vec<Equation>,
}

static ANNOTATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<<([^<>]*)>>").unwrap());
static QUESTION_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?").unwrap());

fn tokenize(lhs: &str, whole: &str) -> Result<Vec<Token>, SwapRejection> {
    let malformed = || SwapRejection::MalformedEquation(whole.to_string());
    let chars: Vec<char> = lhs.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() || c == '$' => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == ',') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let value = text.parse().map_err(|_| malformed())?;
                tokens.push(Token::Num {
                    value,
                    operand: Operand::Leaf,
                });
            }
            '+' | '-' | '*' | '/' => {
                tokens.push(Token::Op(c));
                i += 1;
            }
            '×' => {
                tokens.push(Token::Op('*'));
                i += 1;
            }
            '÷' => {
                tokens.push(Token::Op('/'));
                i += 1;
            }
            '(' => {
                tokens.push(Token::Open);
                i += 1;
            }
            ')' => {
                tokens.push(Token::Close);
                i += 1;
            }
            _ => return Err(malformed()),
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Option<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn term(&mut self) -> Option<Expr> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Some(lhs)
    }

    fn factor(&mut self) -> Option<Expr> {
        match self.peek()? {
            Token::Op('-') => {
                self.pos += 1;
                Some(Expr::Neg(Box::new(self.factor()?)))
            }
            Token::Num { .. } => {
                self.pos += 1;
                Some(Expr::Num(self.pos - 1))
            }
            Token::Open => {
                self.pos += 1;
                let e = self.expr()?;
                match self.peek()? {
                    Token::Close => {
                        self.pos += 1;
                        Some(e)
                    }
                    _ => None,
                }
            }
            _ => None,
        }
    }
}

fn eval(
    expr: &Expr,
    value_of: &dyn Fn(usize) -> BigRational,
) -> Result<BigRational, ()> {
    Ok(match expr {
        Expr::Num(i) => value_of(*i),
        Expr::Neg(e) => -eval(e, value_of)?,
        Expr::Bin(op, l, r) => {
            let a = eval(l, value_of)?;
            let b = eval(r, value_of)?;
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                _ => {
                    if b.is_zero() {
                        return Err(());
                    }
                    a / b
                }
            }
        }
    })
}

fn render_rational(r: &BigRational) -> String {
    match Decimal::from_rational(r.clone()) {
        Ok(d) => d.to_string(),
        Err(_) => format!("{}/{}", r.numer(), r.denom()),
    }
}

impl EquationChain {
    /// Parses equation strings such as `"3+4=7"` or `"<<3+4=7>>"`.
    pub fn parse<S: AsRef<str>>(equations: &[S]) -> Result<Self, SwapRejection> {
        if equations.is_empty() {
            return Err(SwapRejection::NoEquations);
        }
        let mut parsed: Vec<Equation> = Vec::new();
        for raw in equations {
            let text = raw
                .as_ref()
                .trim()
                .trim_start_matches("<<")
                .trim_end_matches(">>")
                .trim()
                .to_string();
            let malformed = || SwapRejection::MalformedEquation(text.clone());
            let (lhs, rhs) = text.rsplit_once('=').ok_or_else(malformed)?;
            let stated: Decimal = rhs.trim().trim_start_matches('$').parse().map_err(|_| malformed())?;
            let mut tokens = tokenize(lhs, &text)?;
            for tok in tokens.iter_mut() {
                if let Token::Num { value, operand } = tok {
                    if let Some(j) = parsed.iter().rposition(|e| &e.stated == value) {
                        *operand = Operand::Ref(j);
                    }
                }
            }
            let mut parser = Parser {
                tokens: &tokens,
                pos: 0,
            };
            let expr = parser.expr().ok_or_else(malformed)?;
            if parser.pos != tokens.len() {
                return Err(malformed());
            }
            parsed.push(Equation {
                text,
                tokens,
                expr,
                stated,
            });
        }
        let chain = EquationChain { equations: parsed };
        chain.check_annotations()?;
        Ok(chain)
    }

    /// Reads `meta.equations` (array of strings) or the `<<…>>` annotations
    /// in `meta.solution`.
    pub fn from_problem(problem: &Problem) -> Result<Self, SwapRejection> {
        if let Some(v) = problem.meta.get("equations") {
            let eqs: Vec<String> = v
                .as_array()
                .ok_or(SwapRejection::NoEquations)?
                .iter()
                .map(|e| e.as_str().map(str::to_string))
                .collect::<Option<_>>()
                .ok_or(SwapRejection::NoEquations)?;
            return Self::parse(&eqs);
        }
        if let Some(solution) = problem.meta.get("solution").and_then(|v| v.as_str()) {
            let eqs: Vec<String> = ANNOTATION
                .captures_iter(solution)
                .map(|c| c[1].to_string())
                .collect();
            return Self::parse(&eqs);
        }
        Err(SwapRejection::NoEquations)
    }

    fn check_annotations(&self) -> Result<(), SwapRejection> {
        let results = self.evaluate(&|v: &Decimal| v.as_rational().clone()).map_err(|i| {
            SwapRejection::MalformedEquation(format!("{} (division by zero)", self.equations[i].text))
        })?;
        for (eq, got) in self.equations.iter().zip(&results) {
            if got != eq.stated.as_rational() {
                return Err(SwapRejection::InconsistentAnnotation {
                    equation: eq.text.clone(),
                    stated: eq.stated.to_string(),
                    computed: render_rational(got),
                });
            }
        }
        Ok(())
    }

    /// Evaluates every equation with leaf values supplied by `leaf`;
    /// references use the recomputed results. Errors carry the index of an
    /// equation that divides by zero.
    fn evaluate(&self, leaf: &dyn Fn(&Decimal) -> BigRational) -> Result<Vec<BigRational>, usize> {
        let mut results: Vec<BigRational> = Vec::with_capacity(self.equations.len());
        for (i, eq) in self.equations.iter().enumerate() {
            let value_of = |t: usize| match &eq.tokens[t] {
                Token::Num {
                    operand: Operand::Ref(j),
                    ..
                } => results[*j].clone(),
                Token::Num { value, .. } => leaf(value),
                _ => unreachable!("expression leaves are numbers"),
            };
            let r = eval(&eq.expr, &value_of).map_err(|_| i)?;
            results.push(r);
        }
        Ok(results)
    }

    /// Distinct leaf operand values in order of first appearance.
    pub fn leaves(&self) -> Vec<Decimal> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for eq in &self.equations {
            for tok in &eq.tokens {
                if let Token::Num {
                    value,
                    operand: Operand::Leaf,
                } = tok
                {
                    if seen.insert(value.clone()) {
                        out.push(value.clone());
                    }
                }
            }
        }
        out
    }

    pub fn final_result(&self) -> &Decimal {
        &self.equations.last().expect("non-empty chain").stated
    }

    pub fn len(&self) -> usize {
        self.equations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.equations.is_empty()
    }

    fn render(&self, map: &BTreeMap<Decimal, Decimal>, results: &[BigRational]) -> Vec<String> {
        self.equations
            .iter()
            .zip(results)
            .map(|(eq, result)| {
                let mut s = String::new();
                for tok in &eq.tokens {
                    match tok {
                        Token::Num {
                            operand: Operand::Ref(j),
                            ..
                        } => s.push_str(&render_rational(&results[*j])),
                        Token::Num { value, .. } => s.push_str(&map[value].to_string()),
                        Token::Op(c) => s.push(*c),
                        Token::Open => s.push('('),
                        Token::Close => s.push(')'),
                    }
                }
                s.push('=');
                s.push_str(&render_rational(result));
                s
            })
            .collect()
    }
}

/// Byte ranges and values of standalone numbers in the question.
fn question_numbers(question: &str) -> Vec<(usize, usize, Decimal)> {
    let bytes = question.as_bytes();
    QUESTION_NUMBER
        .find_iter(question)
        .filter(|m| {
            let before_ok = m.start() == 0 || {
                let b = bytes[m.start() - 1];
                !(b.is_ascii_alphanumeric() || b == b'.' || b == b'_')
            };
            let after_ok = m.end() == bytes.len() || {
                let b = bytes[m.end()];
                let decimal_tail = b == b'.'
                    && bytes.get(m.end() + 1).is_some_and(|n| n.is_ascii_digit());
                !(b.is_ascii_alphanumeric() || b == b'_' || decimal_tail)
            };
            before_ok && after_ok
        })
        .filter_map(|m| Some((m.start(), m.end(), m.as_str().parse().ok()?)))
        .collect()
}

fn locate_leaves(question: &str, leaves: &[Decimal]) -> Result<(), SwapRejection> {
    let found: BTreeSet<Decimal> = question_numbers(question).into_iter().map(|(_, _, v)| v).collect();
    for leaf in leaves {
        if !found.contains(leaf) {
            return Err(SwapRejection::OperandNotFound(leaf.to_string()));
        }
    }
    Ok(())
}

fn numeric_chain(problem: &Problem) -> Result<EquationChain, SwapRejection> {
    if problem.task_kind != TaskKind::Numeric {
        return Err(SwapRejection::NotNumeric);
    }
    let chain = EquationChain::from_problem(problem)?;
    if let Answer::Numeric(gold) = &problem.gold {
        if gold != chain.final_result() {
            return Err(SwapRejection::GoldMismatch {
                result: chain.final_result().to_string(),
                gold: gold.to_string(),
            });
        }
    }
    locate_leaves(&problem.question, &chain.leaves())?;
    Ok(chain)
}

/// Applies an explicit operand map: rewrites every standalone occurrence of
/// each operand in the question and re-evaluates the equation chain.
pub fn apply_swap(
    problem: &Problem,
    map: &BTreeMap<Decimal, Decimal>,
    config: &SwapConfig,
) -> Result<InterventionPair, SwapRejection> {
    let chain = numeric_chain(problem)?;
    apply_with_chain(problem, &chain, map, config, None)
}

fn apply_with_chain(
    problem: &Problem,
    chain: &EquationChain,
    map: &BTreeMap<Decimal, Decimal>,
    config: &SwapConfig,
    seed: Option<u64>,
) -> Result<InterventionPair, SwapRejection> {
    let leaves = chain.leaves();
    for leaf in &leaves {
        if !map.contains_key(leaf) {
            return Err(SwapRejection::IncompleteMap(leaf.to_string()));
        }
    }
    if let Some(extra) = map.keys().find(|k| !leaves.contains(k)) {
        return Err(SwapRejection::UnknownOperand(extra.to_string()));
    }

    let results = chain
        .evaluate(&|v: &Decimal| map[v].as_rational().clone())
        .map_err(SwapRejection::DivisionByZero)?;
    for (i, (eq, r)) in chain.equations.iter().zip(&results).enumerate() {
        if r.is_negative() && !eq.stated.is_negative() {
            return Err(SwapRejection::NegativeIntermediate {
                equation: i,
                value: render_rational(r),
            });
        }
        if config.require_integer && eq.stated.is_integer() && !r.is_integer() {
            return Err(SwapRejection::NonIntegerIntermediate {
                equation: i,
                value: render_rational(r),
            });
        }
    }
    let last = results.last().expect("non-empty chain");
    let gold = Decimal::from_rational(last.clone())
        .map_err(|_| SwapRejection::NonTerminating(render_rational(last)))?;

    let mut question = problem.question.clone();
    for (start, end, value) in question_numbers(&problem.question).into_iter().rev() {
        if let Some(new) = map.get(&value) {
            question.replace_range(start..end, &new.to_string());
        }
    }

    Ok(InterventionPair {
        original_id: problem.id.clone(),
        intervened_question: question,
        intervened_gold: Answer::Numeric(gold),
        kind: InterventionKind::OperandSwap,
        curation: CurationStatus::Accepted,
        provenance: Provenance::Swap {
            seed,
            map: map.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            equations: chain.render(map, &results),
        },
    })
}

/// Draws fresh operands uniformly from the configured range (distinct from
/// the originals and from each other) with ChaCha8 seeded by `seed`, then
/// applies them. Draws that hit a value-dependent rejection are redrawn up
/// to `max_attempts` times; the last rejection is returned otherwise.
pub fn swap_operands(
    problem: &Problem,
    seed: u64,
    config: &SwapConfig,
) -> Result<InterventionPair, SwapRejection> {
    let chain = numeric_chain(problem)?;
    let leaves = chain.leaves();
    let candidates: Vec<i64> = (config.min..=config.max)
        .filter(|c| !leaves.contains(&Decimal::from_i64(*c)))
        .collect();
    if candidates.len() < leaves.len() {
        return Err(SwapRejection::RangeExhausted {
            min: config.min,
            max: config.max,
            needed: leaves.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..config.max_attempts.max(1) {
        let mut pool = candidates.clone();
        let mut map = BTreeMap::new();
        for leaf in &leaves {
            let pick = pool.swap_remove(rng.random_range(0..pool.len()));
            map.insert(leaf.clone(), Decimal::from_i64(pick));
        }
        match apply_with_chain(problem, &chain, &map, config, Some(seed)) {
            Ok(pair) => return Ok(pair),
            Err(e) if e.is_value_dependent() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

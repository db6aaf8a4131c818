//! Problem loading, answer extraction and grading.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::model::{validate_problem, Answer, Problem, RawProblem, TaskKind, ValidationError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("{path}:{line}: {source}")]
    Line {
        path: PathBuf,
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Line { line, .. } | DatasetError::Malformed { line, .. } => Some(*line),
            DatasetError::Io(JsonlError::Parse { line, .. }) => Some(*line),
            _ => None,
        }
    }
}

/// Loads a problem JSONL file. Every record must have the given task kind;
/// ids must be unique. Blank lines are ignored.
pub fn load_problems(path: &Path, task_kind: TaskKind) -> Result<Vec<Problem>, DatasetError> {
    load_problems_inner(path, Some(task_kind))
}

/// Like [`load_problems`] but accepts any mix of task kinds.
pub fn load_any_problems(path: &Path) -> Result<Vec<Problem>, DatasetError> {
    load_problems_inner(path, None)
}

fn load_problems_inner(path: &Path, want: Option<TaskKind>) -> Result<Vec<Problem>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, text) in jsonl::read_lines(path)? {
        let raw: RawProblem =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        let at_line = |source| DatasetError::Line {
            path: path.to_path_buf(),
            line,
            source,
        };
        let problem = validate_problem(raw).map_err(at_line)?;
        if let Some(kind) = want {
            if problem.task_kind != kind {
                return Err(at_line(ValidationError::Schema {
                    field: "task",
                    reason: format!("expected {kind}, found {}", problem.task_kind),
                }));
            }
        }
        if !seen.insert(problem.id.clone()) {
            return Err(at_line(ValidationError::DuplicateId(problem.id)));
        }
        out.push(problem);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStatus {
    Ok,
    ExtractionFailed,
}

/// Which branch of the extraction grammar produced the match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    AnswerMarker,
    FinalNumber,
    TerminalYesNo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub status: ExtractionStatus,
    pub answer: Option<Answer>,
    /// Character offsets `[start, end)` of the matched answer text.
    pub span: Option<(usize, usize)>,
    pub rule: Option<ExtractionRule>,
}

impl ExtractedAnswer {
    pub fn failed() -> Self {
        Self {
            status: ExtractionStatus::ExtractionFailed,
            answer: None,
            span: None,
            rule: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExtractionStatus::Ok
    }
}

const NUMBER: &str = r"-?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|-?\.\d+";
const MARKER: &str = r"(?i)\banswer(?:\s+is|\s*:)\s*:?\s*(?:\*\*)?\s*";

static BINARY_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"{MARKER}(?P<ans>yes|no|true|false)\b")).unwrap());
static CHOICE_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"{MARKER}(?P<ans>\([A-Za-z0-9]{{1,3}}\)|[A-Za-z0-9]{{1,3}}\b)")).unwrap()
});
static NUMERIC_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"{MARKER}\$?\s*(?P<ans>{NUMBER})")).unwrap());
static ANY_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?P<ans>{NUMBER})")).unwrap());
static TERMINAL_YES_NO: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?P<ans>yes|no)\W*$").unwrap());

fn char_span(text: &str, start: usize, end: usize) -> (usize, usize) {
    let s = text[..start].chars().count();
    (s, s + text[start..end].chars().count())
}

fn last_match(
    re: &Regex,
    text: &str,
    kind: TaskKind,
    labels: &[String],
) -> Option<(Answer, (usize, usize))> {
    re.captures_iter(text)
        .filter_map(|caps| {
            let m = caps.name("ans")?;
            let answer = Answer::parse(kind, m.as_str()).ok()?;
            if let Answer::Choice(label) = &answer {
                if !labels.iter().any(|l| l == label) {
                    return None;
                }
            }
            Some((answer, char_span(text, m.start(), m.end())))
        })
        .last()
}

/// Extracts the final answer from a raw completion.
///
/// Grammar, in priority order (the last occurrence of a rule wins):
/// 1. `answer is` / `Answer:` followed by a yes/no token, an option label
///    (bare or parenthesised) or a number;
/// 2. numeric tasks: the final number in the text;
/// 3. binary tasks: a standalone `yes`/`no` ending the text.
pub fn extract_answer(text: &str, task_kind: TaskKind, options: &[String]) -> ExtractedAnswer {
    let labels: Vec<String> = options.iter().map(|l| l.trim().to_lowercase()).collect();
    let marker = match task_kind {
        TaskKind::Binary => &*BINARY_MARKER,
        TaskKind::Mcqa => &*CHOICE_MARKER,
        TaskKind::Numeric => &*NUMERIC_MARKER,
    };
    let found = last_match(marker, text, task_kind, &labels)
        .map(|hit| (hit, ExtractionRule::AnswerMarker))
        .or_else(|| match task_kind {
            TaskKind::Numeric => last_match(&ANY_NUMBER, text, task_kind, &labels)
                .map(|hit| (hit, ExtractionRule::FinalNumber)),
            TaskKind::Binary => last_match(&TERMINAL_YES_NO, text, task_kind, &labels)
                .map(|hit| (hit, ExtractionRule::TerminalYesNo)),
            TaskKind::Mcqa => None,
        });
    match found {
        Some(((answer, span), rule)) => ExtractedAnswer {
            status: ExtractionStatus::Ok,
            answer: Some(answer),
            span: Some(span),
            rule: Some(rule),
        },
        None => ExtractedAnswer::failed(),
    }
}

/// Convenience wrapper taking the option labels from a problem.
pub fn extract_for(problem: &Problem, text: &str) -> ExtractedAnswer {
    let labels: Vec<String> = problem.options.iter().map(|(l, _)| l.clone()).collect();
    extract_answer(text, problem.task_kind, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
}

impl Correctness {
    pub fn is_correct(self) -> bool {
        self == Correctness::Correct
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("answer kind {extracted} does not match gold kind {gold}")]
pub struct KindMismatch {
    pub extracted: TaskKind,
    pub gold: TaskKind,
}

/// Failed extractions grade incorrect; otherwise canonical equality.
pub fn grade(extracted: &ExtractedAnswer, gold: &Answer) -> Result<Correctness, KindMismatch> {
    match &extracted.answer {
        None => Ok(Correctness::Incorrect),
        Some(a) if a.kind() != gold.kind() => Err(KindMismatch {
            extracted: a.kind(),
            gold: gold.kind(),
        }),
        Some(a) if a == gold => Ok(Correctness::Correct),
        Some(_) => Ok(Correctness::Incorrect),
    }
}

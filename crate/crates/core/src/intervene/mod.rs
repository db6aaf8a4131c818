//! Intervened reasoning problems: LLM rewrites for binary tasks, operand
//! swaps for arithmetic word problems, and the human curation pass.

mod curation;
mod swap;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Answer, Problem, TaskKind};
use crate::prompt::RenderedPrompt;

pub use curation::{curate, CurationDecision, CurationError, CurationOutcome, Verdict};
pub use swap::{apply_swap, swap_operands, EquationChain, SwapConfig, SwapRejection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    LlmRewrite,
    OperandSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurationStatus {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Provenance {
    Generated {
        generator: String,
        prompt_digest: String,
    },
    Swap {
        seed: Option<u64>,
        /// Original operand value to its replacement, both canonical.
        map: BTreeMap<String, String>,
        equations: Vec<String>,
    },
}

/// An intervened problem X₁ linked to its original X₀.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPair {
    pub original_id: String,
    pub intervened_question: String,
    pub intervened_gold: Answer,
    pub kind: InterventionKind,
    pub curation: CurationStatus,
    pub provenance: Provenance,
}

impl InterventionPair {
    /// The intervened problem. It keeps the original id so outcome records
    /// for X₀ and X₁ join on the same key.
    pub fn intervened_problem(&self, original: &Problem) -> Problem {
        Problem {
            id: original.id.clone(),
            task_kind: original.task_kind,
            question: self.intervened_question.clone(),
            options: original.options.clone(),
            gold: self.intervened_gold.clone(),
            meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstructionPoolError {
    #[error("instruction pool is empty")]
    Empty,
    #[error("cannot read instruction pool {path}: {message}")]
    Io { path: String, message: String },
}

/// Semantically equivalent generation instructions, sampled per draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPool {
    instructions: Vec<String>,
    seed: u64,
}

impl InstructionPool {
    pub fn new(instructions: Vec<String>, seed: u64) -> Result<Self, InstructionPoolError> {
        let instructions: Vec<String> = instructions
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if instructions.is_empty() {
            return Err(InstructionPoolError::Empty);
        }
        Ok(Self { instructions, seed })
    }

    /// One instruction per non-blank line.
    pub fn from_file(path: &Path, seed: u64) -> Result<Self, InstructionPoolError> {
        let text = std::fs::read_to_string(path).map_err(|e| InstructionPoolError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(text.lines().map(str::to_string).collect(), seed)
    }

    /// Built-in pool for binary yes/no rewrites.
    pub fn default_binary(seed: u64) -> Self {
        let instructions = [
            "Rewrite the question below with a minimal edit so that its correct yes/no answer becomes the opposite one.",
            "Change as few words as possible in the question below so that the right yes/no answer flips.",
            "Produce a close variant of the question below whose correct yes/no answer is reversed.",
            "Edit the question below slightly so that answering it correctly requires the opposite yes/no answer.",
            "Make a small change to the question below that turns its correct yes/no answer into the other one.",
        ];
        Self::new(instructions.iter().map(|s| s.to_string()).collect(), seed)
            .expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index of the instruction used for `draw_index`.
    ///
    /// Draws are grouped into cycles of `len()` consecutive draws. Cycle `c`
    /// is a Fisher-Yates shuffle of `0..len()` driven by ChaCha8 seeded with
    /// `seed` on stream `c`, so draws within a cycle never repeat an
    /// instruction and any draw can be replayed independently.
    pub fn pick_index(&self, draw_index: u64) -> usize {
        let n = self.instructions.len() as u64;
        let cycle = draw_index / n;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(cycle);
        let mut order: Vec<usize> = (0..self.instructions.len()).collect();
        order.shuffle(&mut rng);
        order[(draw_index % n) as usize]
    }

    pub fn pick(&self, draw_index: u64) -> &str {
        &self.instructions[self.pick_index(draw_index)]
    }
}

/// A worked rewrite shown to the generator before the target question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionExemplar {
    pub question: String,
    pub answer: String,
    pub intervened_question: String,
    pub intervened_answer: String,
}

pub const INTERVENED_MARKER: &str = "Intervened question:";

/// Renders the rewrite prompt: sampled instruction, exemplars, then the
/// target question with its gold answer, ending on the output marker.
pub fn render_intervention_prompt(
    problem: &Problem,
    pool: &InstructionPool,
    few_shots: &[InterventionExemplar],
    draw_index: u64,
) -> RenderedPrompt {
    let mut text = String::new();
    text.push_str(pool.pick(draw_index));
    text.push('\n');
    if !few_shots.is_empty() {
        text.push_str("Examples:\n");
    }
    for ex in few_shots {
        let _ = write!(
            text,
            "\nQuestion: {}\nAnswer: {}\n{INTERVENED_MARKER} {}\nAnswer: {}\n",
            ex.question, ex.answer, ex.intervened_question, ex.intervened_answer
        );
    }
    let _ = write!(
        text,
        "\nQuestion: {}\nAnswer: {}\n{INTERVENED_MARKER}",
        problem.question, problem.gold
    );
    RenderedPrompt::new(text)
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("problem `{0}`: rewrites are only generated for binary problems")]
    UnsupportedTask(String),
    #[error("problem `{0}`: no rewritten question found in completion")]
    NoRewrite(String),
    #[error("problem `{0}`: rewritten question is identical to the original")]
    Unchanged(String),
}

/// Extracts the rewritten question from a generator completion. The last
/// `Intervened question:` marker wins; without a marker, a completion that
/// is a single question line is taken as-is.
pub fn parse_generated_intervention(
    raw_completion: &str,
    problem: &Problem,
    generator: &str,
    prompt_digest: &str,
) -> Result<InterventionPair, ParseError> {
    if problem.task_kind != TaskKind::Binary {
        return Err(ParseError::UnsupportedTask(problem.id.clone()));
    }
    let lower = raw_completion.to_lowercase();
    let marker = INTERVENED_MARKER.to_lowercase();
    let candidate = match lower.rfind(&marker) {
        Some(pos) => {
            // Lowercasing ASCII markers keeps byte offsets aligned.
            let rest = &raw_completion[pos + marker.len()..];
            rest.trim_start().lines().next().unwrap_or("").to_string()
        }
        None => {
            let lines: Vec<&str> = raw_completion
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            match lines.as_slice() {
                [only] if only.ends_with('?') => only.to_string(),
                _ => String::new(),
            }
        }
    };
    let question = candidate
        .trim()
        .trim_matches(|c| matches!(c, '"' | '*' | '`' | '\u{201c}' | '\u{201d}'))
        .trim()
        .to_string();
    if question.is_empty() {
        return Err(ParseError::NoRewrite(problem.id.clone()));
    }
    if question == problem.question.trim() {
        return Err(ParseError::Unchanged(problem.id.clone()));
    }
    Ok(InterventionPair {
        original_id: problem.id.clone(),
        intervened_question: question,
        intervened_gold: problem.gold.negated().expect("binary gold"),
        kind: InterventionKind::LlmRewrite,
        curation: CurationStatus::Pending,
        provenance: Provenance::Generated {
            generator: generator.to_string(),
            prompt_digest: prompt_digest.to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_problem, RawProblem};
    use serde_json::json;

    fn binary(id: &str, q: &str, gold: &str) -> Problem {
        let raw: RawProblem =
            serde_json::from_value(json!({"id": id, "task": "binary", "question": q, "gold": gold}))
                .unwrap();
        validate_problem(raw).unwrap()
    }

    fn pool(n: usize, seed: u64) -> InstructionPool {
        InstructionPool::new((0..n).map(|i| format!("instruction {i}")).collect(), seed).unwrap()
    }

    #[test]
    fn single_instruction_always_chosen() {
        let p = pool(1, 3);
        for d in 0..20 {
            assert_eq!(p.pick(d), "instruction 0");
        }
    }

    #[test]
    fn empty_pool_rejected() {
        assert_eq!(
            InstructionPool::new(vec![" ".into()], 0),
            Err(InstructionPoolError::Empty)
        );
    }

    /// Replays the documented procedure step by step.
    fn replay(n: usize, seed: u64, draw: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(draw / n as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order[(draw % n as u64) as usize]
    }

    #[test]
    fn seeded_picks_replay_and_differ() {
        let p = pool(5, 7);
        for d in 0..25 {
            assert_eq!(p.pick_index(d), replay(5, 7, d));
        }
        assert_ne!(p.pick_index(0), p.pick_index(1));
        let cycle: std::collections::BTreeSet<_> = (0..5).map(|d| p.pick_index(d)).collect();
        assert_eq!(cycle.len(), 5);
    }

    #[test]
    fn prompt_layout_and_digest() {
        let prob = binary("q1", "Is Poseidon similar to the god Vulcan?", "no");
        let shots = vec![
            InterventionExemplar {
                question: "Is ice cold?".into(),
                answer: "yes".into(),
                intervened_question: "Is fire cold?".into(),
                intervened_answer: "no".into(),
            },
            InterventionExemplar {
                question: "Can fish swim?".into(),
                answer: "yes".into(),
                intervened_question: "Can rocks swim?".into(),
                intervened_answer: "no".into(),
            },
        ];
        let p = pool(1, 0);
        let a = render_intervention_prompt(&prob, &p, &shots, 0);
        let b = render_intervention_prompt(&prob, &p, &shots, 0);
        assert_eq!(a, b);
        let t = &a.text;
        let i_instr = t.find("instruction 0").unwrap();
        let i_ex1 = t.find("Is ice cold?").unwrap();
        let i_ex2 = t.find("Can fish swim?").unwrap();
        let i_target = t.find("Vulcan").unwrap();
        assert!(i_instr < i_ex1 && i_ex1 < i_ex2 && i_ex2 < i_target);
        assert!(t.ends_with(INTERVENED_MARKER));
        assert_eq!(a.digest, crate::digest::sha256_hex(t.as_bytes()));
    }

    #[test]
    fn parses_rewrite_and_flips_gold() {
        let prob = binary("q1", "Is Poseidon similar to the god Vulcan?", "no");
        let pair = parse_generated_intervention(
            "Sure.\nIntervened question: Is Poseidon similar to the god Neptune?\n",
            &prob,
            "gpt-4",
            "abc",
        )
        .unwrap();
        assert_eq!(pair.intervened_question, "Is Poseidon similar to the god Neptune?");
        assert_eq!(pair.intervened_gold, Answer::Binary(true));
        assert_eq!(pair.kind, InterventionKind::LlmRewrite);
        assert_eq!(pair.curation, CurationStatus::Pending);
        assert_ne!(pair.intervened_gold, prob.gold);
    }

    #[test]
    fn missing_marker_is_parse_failure() {
        let prob = binary("q1", "Is the sky green?", "no");
        assert_eq!(
            parse_generated_intervention("I would rather not.", &prob, "g", "d"),
            Err(ParseError::NoRewrite("q1".into()))
        );
        assert_eq!(
            parse_generated_intervention("Intervened question: Is the sky green?", &prob, "g", "d"),
            Err(ParseError::Unchanged("q1".into()))
        );
    }

    #[test]
    fn intervened_problem_keeps_original_id() {
        let prob = binary("q1", "Is the sky green?", "no");
        let pair =
            parse_generated_intervention("Intervened question: Is grass green?", &prob, "g", "d")
                .unwrap();
        let x1 = pair.intervened_problem(&prob);
        assert_eq!(x1.id, "q1");
        assert_eq!(x1.gold, Answer::Binary(true));
    }
}

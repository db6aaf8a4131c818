//! Causal mediation analysis for chain-of-thought reasoning.
//!
//! The crate is organised along the evaluation pipeline:
//!
//! * [`model`] holds the shared domain types (problems, answers, chains).
//! * [`datasets`] loads problem files and extracts/grades model answers.
//! * [`intervene`] builds intervened problems, either through an LLM rewrite
//!   or by swapping arithmetic operands, and applies human curation.
//! * [`chains`] renders reasoning prompts, samples chains and assembles
//!   preference pairs.
//! * [`client`] talks to OpenAI-compatible endpoints with caching and retries.
//! * [`effects`] joins graded outcomes into potential-outcome tables and
//!   computes indirect/direct effects, flip rates and permutation p-values.
//! * [`scores`] evaluates the preference and reasoner objectives on
//!   log-probabilities, plus the simulatability metric.
//! * [`report`] renders effect tables and run manifests.

pub mod chains;
pub mod client;
pub mod datasets;
pub mod digest;
pub mod effects;
pub mod intervene;
pub mod jsonl;
pub mod model;
pub mod prompt;
pub mod report;
pub mod scores;

pub use model::{Answer, Chain, ChainRole, Decimal, ModelSpec, PreferencePair, Problem, TaskKind};

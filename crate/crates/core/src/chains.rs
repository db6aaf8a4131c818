//! Reasoning chains: prompt rendering, sampling, irrelevant-chain donors and
//! preference-pair assembly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, ClientError, CompletionRequest};
use crate::datasets::{extract_for, ExtractionRule};
use crate::digest::sha256_hex;
use crate::intervene::{CurationStatus, InterventionPair};
use crate::model::{Answer, Chain, ChainRole, DonorRef, ModelSpec, PreferencePair, Problem, ValidationError};
use crate::prompt::{RenderedPrompt, STEP_BY_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    Factual,
    Counterfactual,
}

impl ChainMode {
    pub fn role(self) -> ChainRole {
        match self {
            ChainMode::Factual => ChainRole::Factual,
            ChainMode::Counterfactual => ChainRole::Counterfactual,
        }
    }
}

/// A demonstration for chain prompts: a question, its worked steps and answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainExemplar {
    pub question: String,
    pub steps: String,
    pub answer: String,
}

const COUNTERFACTUAL_INSTRUCTION: &str = "You help with reasoning questions. Each question below comes \
with its correct answer. Write intermediate steps that argue for a different, counterfactual \
answer. Two demonstrations follow.";

fn render_question(problem: &Problem) -> String {
    let mut q = problem.question.clone();
    for (label, text) in &problem.options {
        let _ = write!(q, " ({label}) {text}");
    }
    q
}

/// Factual prompts are `<exemplars> Q Let's think step by step`; counterfactual
/// prompts are an instruction, the exemplars, then the target question.
pub fn render_chain_prompt(problem: &Problem, mode: ChainMode, few_shots: &[ChainExemplar]) -> RenderedPrompt {
    let mut text = String::new();
    if mode == ChainMode::Counterfactual {
        text.push_str(COUNTERFACTUAL_INSTRUCTION);
        text.push_str("\n\n");
    }
    for ex in few_shots {
        let _ = write!(
            text,
            "Question: {} {STEP_BY_STEP}\n{} Answer: {}\n\n",
            ex.question, ex.steps, ex.answer
        );
    }
    match mode {
        ChainMode::Factual if few_shots.is_empty() => {
            let _ = write!(text, "{} {STEP_BY_STEP}", render_question(problem));
        }
        _ => {
            let _ = write!(text, "Question: {} {STEP_BY_STEP}", render_question(problem));
        }
    }
    RenderedPrompt::new(text)
}

/// Removes the sentence carrying an explicit answer, so the chain holds
/// reasoning only. A bare final number is part of the reasoning and stays.
pub fn strip_answer(problem: &Problem, completion: &str) -> String {
    let extracted = extract_for(problem, completion);
    let (Some((start, _)), Some(rule)) = (extracted.span, extracted.rule) else {
        return completion.trim().to_string();
    };
    if rule == ExtractionRule::FinalNumber {
        return completion.trim().to_string();
    }
    let byte_start = completion
        .char_indices()
        .nth(start)
        .map_or(completion.len(), |(b, _)| b);
    let head = &completion[..byte_start];
    let cut = head
        .rfind(['.', '!', '?', '\n'])
        .map_or(0, |i| i + 1);
    let stripped = completion[..cut].trim();
    if stripped.is_empty() {
        completion.trim().to_string()
    } else {
        stripped.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub problem_id: String,
    pub sample_index: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampledChains {
    pub chains: Vec<Chain>,
    pub failures: Vec<SampleFailure>,
}

/// One request per sample; `sample_index` enters the request (and so the
/// cache key and wire seed).
pub async fn sample_chains(
    client: &Client,
    problem: &Problem,
    prompt: &RenderedPrompt,
    role: ChainRole,
    k: u32,
    model: &ModelSpec,
) -> SampledChains {
    let requests: Vec<CompletionRequest> = (0..k)
        .map(|i| CompletionRequest::new(model.clone(), prompt.messages()).with_sample(i))
        .collect();
    let results = client.batch_complete(&requests, client.config().max_in_flight).await;
    collect_samples(problem, prompt, role, model, results)
}

fn collect_samples(
    problem: &Problem,
    prompt: &RenderedPrompt,
    role: ChainRole,
    model: &ModelSpec,
    results: Vec<Result<crate::client::Completion, ClientError>>,
) -> SampledChains {
    let mut out = SampledChains::default();
    for (i, result) in results.into_iter().enumerate() {
        let sample_index = i as u32;
        match result {
            Ok(c) => out.chains.push(Chain {
                problem_id: problem.id.clone(),
                role,
                text: strip_answer(problem, &c.text),
                generator: model.model_id.clone(),
                prompt_digest: prompt.digest.clone(),
                temperature: model.decoding.temperature,
                sample_index,
                donor: None,
            }),
            Err(e) => out.failures.push(SampleFailure {
                problem_id: problem.id.clone(),
                sample_index,
                error: e.to_string(),
            }),
        }
    }
    out
}

/// Samples R₁ for controlled evaluation: the factual prompt of the
/// intervened problem, recorded as a counterfactual chain of the original.
pub async fn sample_intervened_chains(
    client: &Client,
    original: &Problem,
    pair: &InterventionPair,
    few_shots: &[ChainExemplar],
    k: u32,
    model: &ModelSpec,
) -> SampledChains {
    let intervened = pair.intervened_problem(original);
    let prompt = render_chain_prompt(&intervened, ChainMode::Factual, few_shots);
    sample_chains(client, &intervened, &prompt, ChainRole::Counterfactual, k, model).await
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChainError {
    #[error("no donor chain from a problem other than `{0}`")]
    EmptyPool(String),
    #[error("problems without the required chains: {}", .0.join(", "))]
    MissingChains(Vec<String>),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Borrows the text of a uniformly drawn chain from another problem.
pub fn make_irrelevant_chain(problem_id: &str, donors: &[Chain], seed: u64) -> Result<Chain, ChainError> {
    let eligible: Vec<&Chain> = donors.iter().filter(|c| c.problem_id != problem_id).collect();
    if eligible.is_empty() {
        return Err(ChainError::EmptyPool(problem_id.to_string()));
    }
    // Mixing in the target id keeps donors independent across targets.
    let h = sha256_hex(format!("{seed}:{problem_id}").as_bytes());
    let mixed = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let donor = eligible[rng.random_range(0..eligible.len())];
    Ok(Chain {
        problem_id: problem_id.to_string(),
        role: ChainRole::Irrelevant,
        text: donor.text.clone(),
        generator: donor.generator.clone(),
        prompt_digest: donor.prompt_digest.clone(),
        temperature: donor.temperature,
        sample_index: donor.sample_index,
        donor: Some(DonorRef {
            problem_id: donor.problem_id.clone(),
            role: donor.role,
            prompt_digest: donor.prompt_digest.clone(),
            sample_index: donor.sample_index,
        }),
    })
}

fn group_by_problem(chains: &[Chain]) -> HashMap<&str, Vec<&Chain>> {
    let mut m: HashMap<&str, Vec<&Chain>> = HashMap::new();
    for c in chains {
        m.entry(c.problem_id.as_str()).or_default().push(c);
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| {
            (a.sample_index, a.role, &a.generator, &a.prompt_digest)
                .cmp(&(b.sample_index, b.role, &b.generator, &b.prompt_digest))
        });
    }
    m
}

/// Pairs every factual chain with every negative chain of the same problem,
/// ordered by `(factual sample_index, negative sample_index)` and truncated
/// to `cap` pairs per problem.
pub fn assemble_preference_pairs(
    problems: &[Problem],
    factual: &[Chain],
    negatives: &[Chain],
    interventions: &[InterventionPair],
    cap: Option<usize>,
) -> Result<Vec<PreferencePair>, ChainError> {
    let by_fact = group_by_problem(factual);
    let by_neg = group_by_problem(negatives);
    let flipped: BTreeMap<&str, &Answer> = interventions
        .iter()
        .filter(|p| p.curation == CurationStatus::Accepted)
        .map(|p| (p.original_id.as_str(), &p.intervened_gold))
        .collect();

    let missing: Vec<String> = problems
        .iter()
        .filter(|p| !by_fact.contains_key(p.id.as_str()) || !by_neg.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ChainError::MissingChains(missing));
    }

    let mut pairs = Vec::new();
    for problem in problems {
        let mut combos = Vec::new();
        for f in &by_fact[problem.id.as_str()] {
            for n in &by_neg[problem.id.as_str()] {
                combos.push((*f, *n));
            }
        }
        combos.truncate(cap.unwrap_or(usize::MAX));
        for (f, n) in combos {
            let disp_answer = match (n.role, flipped.get(problem.id.as_str())) {
                (ChainRole::Counterfactual, Some(g)) if **g != problem.gold => Some((*g).clone()),
                _ => None,
            };
            pairs.push(PreferencePair::new(problem, f.clone(), n.clone(), disp_answer)?);
        }
    }
    Ok(pairs)
}

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cotmed::client::CompletionRequest;
use cotmed::datasets::extract_for;
use cotmed::jsonl::{write_json, write_jsonl};
use cotmed::prompt::RenderedPrompt;
use cotmed::scores::{las, SimulatorRecord};
use cotmed::{Answer, Chain, ChainRole, Problem};
use serde::Serialize;
use serde_json::Value;

use super::{finish_with, problems, read};
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    problems: PathBuf,
    /// The evaluated model's answers: `{"problem_id", "answer"}` lines, or
    /// outcome records (their X0R0 cell is used).
    #[arg(long)]
    model_predictions: PathBuf,
    /// Chains whose text serves as the rationale.
    #[arg(long)]
    rationales: PathBuf,
    #[arg(long)]
    simulator: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Item {
    problem_id: String,
    prediction: Answer,
    with_rationale: Option<Answer>,
    without_rationale: Option<Answer>,
}

fn prediction(problem: &Problem, line: &Value) -> anyhow::Result<Option<Answer>> {
    if line.get("condition").and_then(Value::as_str).is_some_and(|c| c != "X0R0") {
        return Ok(None);
    }
    Ok(match &line["answer"] {
        Value::String(s) => Some(Answer::parse(problem.task_kind, s)?),
        Value::Null => None,
        other => Some(serde_json::from_value(other.clone())?),
    })
}

fn question(problem: &Problem) -> String {
    let mut q = problem.question.clone();
    for (label, text) in &problem.options {
        q.push_str(&format!(" ({label}) {text}"));
    }
    q
}

pub async fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let problems = problems(&args.problems)?;
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let lines: Vec<Value> = read(&args.model_predictions)?;
    let mut predictions: HashMap<String, Answer> = HashMap::new();
    for line in &lines {
        let id = line["problem_id"].as_str().context("prediction without problem_id")?;
        let problem = by_id.get(id).with_context(|| format!("prediction for unknown problem `{id}`"))?;
        if let Some(a) = prediction(problem, line)? {
            predictions.insert(id.to_string(), a);
        }
    }
    let chains: Vec<Chain> = read(&args.rationales)?;
    let mut rationale: HashMap<&str, &Chain> = HashMap::new();
    for c in chains.iter().filter(|c| c.role == ChainRole::Factual) {
        let e = rationale.entry(c.problem_id.as_str()).or_insert(c);
        if c.sample_index < e.sample_index {
            *e = c;
        }
    }

    let items: Vec<(&Problem, &Answer, &Chain)> = problems
        .iter()
        .filter_map(|p| Some((p, predictions.get(&p.id)?, *rationale.get(p.id.as_str())?)))
        .collect();
    anyhow::ensure!(!items.is_empty(), "no problem has both a prediction and a rationale");

    let client = ctx.client()?;
    let sim = ctx.model(&args.simulator, 0.0, None);
    let mut requests = Vec::new();
    for (p, _, c) in &items {
        let with = RenderedPrompt::new(format!("Question: {}\nExplanation: {}\nAnswer:", question(p), c.text));
        let without = RenderedPrompt::new(format!("Question: {}\nAnswer:", question(p)));
        requests.push(CompletionRequest::new(sim.clone(), with.messages()));
        requests.push(CompletionRequest::new(sim.clone(), without.messages()));
    }
    let results = client.batch_complete(&requests, ctx.config.client.max_in_flight).await;

    let mut with_recs = Vec::new();
    let mut without_recs = Vec::new();
    let mut detail = Vec::new();
    let mut failures = Vec::new();
    for ((p, pred, _), pair) in items.iter().zip(results.chunks(2)) {
        let (Ok(w), Ok(wo)) = (&pair[0], &pair[1]) else {
            failures.push(format!("{}: simulator request failed", p.id));
            continue;
        };
        let aw = extract_for(p, &w.text).answer;
        let awo = extract_for(p, &wo.text).answer;
        with_recs.push(SimulatorRecord { problem_id: p.id.clone(), matches_prediction: aw.as_ref() == Some(*pred) });
        without_recs.push(SimulatorRecord { problem_id: p.id.clone(), matches_prediction: awo.as_ref() == Some(*pred) });
        detail.push(Item {
            problem_id: p.id.clone(),
            prediction: (*pred).clone(),
            with_rationale: aw,
            without_rationale: awo,
        });
    }
    let result = las(&with_recs, &without_recs)?;
    let out = args.out.unwrap_or_else(|| run.path("reports", "las.json"));
    let items_out = out.with_extension("items.jsonl");
    write_json(&out, &result)?;
    write_jsonl(&items_out, &detail)?;
    println!("LAS {:.4} over {} items ({} vs {})", result.las, result.n, result.matches_with, result.matches_without);
    run.stage("las")
        .input(&args.problems)?
        .input(&args.model_predictions)?
        .input(&args.rationales)?
        .model(&sim)
        .cache(client.stats())
        .finish(&[&out, &items_out])?;
    Ok(finish_with(&failures))
}

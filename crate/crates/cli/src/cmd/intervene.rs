use std::path::PathBuf;
use std::process::ExitCode;

use clap::ValueEnum;
use cotmed::client::CompletionRequest;
use cotmed::intervene::{
    parse_generated_intervention, render_intervention_prompt, swap_operands, InstructionPool, InterventionExemplar,
};
use cotmed::jsonl::write_jsonl;
use cotmed::TaskKind;
use serde::Serialize;

use super::{finish_with, problems, read};
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    LlmRewrite,
    OperandSwap,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Expected task kind of every problem.
    #[arg(long, value_parser = parse_kind)]
    task: TaskKind,
    /// Problem JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "llm-rewrite")]
    strategy: Strategy,
    /// Generator model id (LLM rewrite).
    #[arg(long, default_value = "gpt-4")]
    generator: String,
    /// Instruction pool, one per line; a built-in pool is used otherwise.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Rewrite demonstrations (JSONL).
    #[arg(long)]
    few_shots: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output; defaults to pending/ (rewrite) or curated/ (swap).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

#[derive(Serialize)]
struct Rejection {
    problem_id: String,
    reason: String,
}

pub async fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let problems = problems(&args.input)?;
    if let Some(p) = problems.iter().find(|p| p.task_kind != args.task) {
        anyhow::bail!("problem `{}` is {}, expected {}", p.id, p.task_kind, args.task);
    }
    let seed = args.seed.unwrap_or(ctx.config.intervene.seed);
    let mut stage = run.stage("intervene").input(&args.input)?.seed("intervene", seed);

    match args.strategy {
        Strategy::OperandSwap => {
            let out = args.out.unwrap_or_else(|| run.path("curated", "interventions.jsonl"));
            let cfg = &ctx.config.intervene.swap;
            let mut accepted = Vec::new();
            let mut rejected = Vec::new();
            for (i, p) in problems.iter().enumerate() {
                match swap_operands(p, seed.wrapping_add(i as u64), cfg) {
                    Ok(pair) => accepted.push(pair),
                    Err(e) => rejected.push(Rejection {
                        problem_id: p.id.clone(),
                        reason: e.to_string(),
                    }),
                }
            }
            write_jsonl(&out, &accepted)?;
            let rej_path = run.path("curated", "swap_rejections.jsonl");
            write_jsonl(&rej_path, &rejected)?;
            eprintln!("{} accepted, {} rejected", accepted.len(), rejected.len());
            stage.config(cfg).finish(&[&out, &rej_path])?;
            Ok(ExitCode::SUCCESS)
        }
        Strategy::LlmRewrite => {
            let out = args.out.unwrap_or_else(|| run.path("pending", "interventions.jsonl"));
            let pool = match &args.pool {
                Some(path) => {
                    stage = stage.input(path)?;
                    InstructionPool::from_file(path, seed)?
                }
                None => InstructionPool::default_binary(seed),
            };
            let shots: Vec<InterventionExemplar> = match &args.few_shots {
                Some(path) => {
                    stage = stage.input(path)?;
                    read(path)?
                }
                None => Vec::new(),
            };
            let client = ctx.client()?;
            let model = ctx.model(&args.generator, ctx.config.intervene.temperature, None);
            let prompts: Vec<_> = problems
                .iter()
                .enumerate()
                .map(|(i, p)| render_intervention_prompt(p, &pool, &shots, i as u64))
                .collect();
            let requests: Vec<_> = prompts
                .iter()
                .map(|pr| CompletionRequest::new(model.clone(), pr.messages()))
                .collect();
            let results = client.batch_complete(&requests, ctx.config.client.max_in_flight).await;
            let mut pending = Vec::new();
            let mut failures = Vec::new();
            for ((p, pr), res) in problems.iter().zip(&prompts).zip(results) {
                let parsed = res
                    .map_err(|e| e.to_string())
                    .and_then(|c| parse_generated_intervention(&c.text, p, &model.model_id, &pr.digest).map_err(|e| e.to_string()));
                match parsed {
                    Ok(pair) => pending.push(pair),
                    Err(e) => failures.push(format!("{}: {e}", p.id)),
                }
            }
            write_jsonl(&out, &pending)?;
            eprintln!("{} pending, {} failed", pending.len(), failures.len());
            stage.model(&model).cache(client.stats()).finish(&[&out])?;
            Ok(finish_with(&failures))
        }
    }
}

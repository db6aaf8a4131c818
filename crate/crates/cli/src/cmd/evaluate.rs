use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use cotmed::client::CompletionRequest;
use cotmed::effects::{grade_outcome, render_outcome_prompt, Condition, OutcomeRecord};
use cotmed::jsonl::write_jsonl;
use cotmed::{Chain, ChainRole, Problem};

use super::{accepted, finish_with, problems, read};
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    problems: PathBuf,
    /// Chain files; factual chains supply R0 and counterfactual chains R1.
    #[arg(long, num_args = 1.., required = true)]
    chains: Vec<PathBuf>,
    /// Accepted interventions supplying X1.
    #[arg(long)]
    intervened: PathBuf,
    /// Evaluated model id.
    #[arg(long)]
    model: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The lowest-index chain per problem for a role.
fn first_by_role(chains: &[Chain], role: ChainRole) -> HashMap<&str, &Chain> {
    let mut m: HashMap<&str, &Chain> = HashMap::new();
    for c in chains.iter().filter(|c| c.role == role) {
        let e = m.entry(c.problem_id.as_str()).or_insert(c);
        if c.sample_index < e.sample_index {
            *e = c;
        }
    }
    m
}

struct Cell<'a> {
    graded_against: Problem,
    condition: Condition,
    chain: &'a Chain,
}

pub async fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let problems = problems(&args.problems)?;
    let interventions = accepted(&args.intervened)?;
    let mut chains: Vec<Chain> = Vec::new();
    for p in &args.chains {
        chains.extend(read::<Chain>(p)?);
    }
    let r0 = first_by_role(&chains, ChainRole::Factual);
    let r1 = first_by_role(&chains, ChainRole::Counterfactual);

    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for p in &problems {
        match (interventions.get(&p.id), r0.get(p.id.as_str()), r1.get(p.id.as_str())) {
            (Some(pair), Some(c0), Some(c1)) => {
                cells.push(Cell { graded_against: p.clone(), condition: Condition::X0R0, chain: c0 });
                cells.push(Cell { graded_against: p.clone(), condition: Condition::X0R1, chain: c1 });
                cells.push(Cell {
                    graded_against: pair.intervened_problem(p),
                    condition: Condition::X1R0,
                    chain: c0,
                });
            }
            (pair, c0, c1) => {
                let mut missing = Vec::new();
                if pair.is_none() {
                    missing.push("accepted intervention");
                }
                if c0.is_none() {
                    missing.push("factual chain");
                }
                if c1.is_none() {
                    missing.push("counterfactual chain");
                }
                skipped.push(format!("{}: no {}", p.id, missing.join(", ")));
            }
        }
    }
    for s in &skipped {
        log::warn!("skipping {s}");
    }
    anyhow::ensure!(!cells.is_empty(), "no problem has an intervention and both chains");

    let client = ctx.client()?;
    let model = ctx.model(&args.model, ctx.config.evaluate.temperature, None);
    let requests: Vec<_> = cells
        .iter()
        .map(|c| CompletionRequest::new(model.clone(), render_outcome_prompt(&c.graded_against, &c.chain.text).messages()))
        .collect();
    let results = client.batch_complete(&requests, ctx.config.client.max_in_flight).await;

    let mut records: Vec<OutcomeRecord> = Vec::new();
    let mut failures = Vec::new();
    for (cell, res) in cells.iter().zip(results) {
        match res {
            Ok(c) => records.push(grade_outcome(
                &cell.graded_against,
                cell.condition,
                &c.text,
                &model.model_id,
                &cell.chain.generator,
            )?),
            Err(e) => failures.push(format!("{} {}: {e}", cell.graded_against.id, cell.condition)),
        }
    }
    records.sort_by(|a, b| (&a.problem_id, a.condition).cmp(&(&b.problem_id, b.condition)));
    let out = args.out.unwrap_or_else(|| run.path("records", &format!("outcomes_{}.jsonl", super::file_stem(&args.model))));
    write_jsonl(&out, &records)?;
    eprintln!("{} records written, {} problems skipped", records.len(), skipped.len());
    run.stage("evaluate")
        .input(&args.problems)?
        .inputs(&args.chains)?
        .input(&args.intervened)?
        .model(&model)
        .cache(client.stats())
        .finish(&[&out])?;
    Ok(finish_with(&failures))
}

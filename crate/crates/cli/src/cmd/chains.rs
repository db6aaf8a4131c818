use std::path::PathBuf;
use std::process::ExitCode;

use clap::ValueEnum;
use cotmed::chains::{
    make_irrelevant_chain, render_chain_prompt, sample_chains, sample_intervened_chains, ChainExemplar, ChainMode,
    SampledChains,
};
use cotmed::jsonl::write_jsonl;
use cotmed::model::validate_chains;
use cotmed::{Chain, ChainRole};
use futures::stream::{self, StreamExt};

use super::{accepted, finish_with, problems, read};
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Factual,
    Counterfactual,
    Irrelevant,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    problems: PathBuf,
    /// Generating model id.
    #[arg(long, default_value = "gpt-4")]
    model: String,
    /// Samples per problem (default 1 factual, 2 counterfactual).
    #[arg(long)]
    k: Option<u32>,
    /// Sampling temperature (default 0 factual, 0.5 counterfactual).
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Demonstrations (JSONL of question/steps/answer).
    #[arg(long)]
    few_shots: Option<PathBuf>,
    /// Counterfactual mode: sample R1 from the factual prompt of each
    /// accepted intervened problem instead of the counterfactual template.
    #[arg(long)]
    intervened: Option<PathBuf>,
    /// Irrelevant mode: chains to borrow text from.
    #[arg(long)]
    donors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub async fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let problems = problems(&args.problems)?;
    let cfg = &ctx.config.chains;
    let seed = args.seed.unwrap_or(cfg.seed);
    let name = match args.mode {
        Mode::Factual => "factual",
        Mode::Counterfactual => "counterfactual",
        Mode::Irrelevant => "irrelevant",
    };
    let out = args.out.clone().unwrap_or_else(|| run.path("chains", &format!("{name}.jsonl")));
    let mut stage = run.stage("chains").input(&args.problems)?.seed("chains", seed);

    if args.mode == Mode::Irrelevant {
        let donors_path = args
            .donors
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--mode irrelevant needs --donors"))?;
        stage = stage.input(donors_path)?;
        let donors: Vec<Chain> = read(donors_path)?;
        let mut chains = Vec::new();
        let mut failures = Vec::new();
        for p in &problems {
            match make_irrelevant_chain(&p.id, &donors, seed) {
                Ok(c) => chains.push(c),
                Err(e) => failures.push(e.to_string()),
            }
        }
        write_jsonl(&out, &chains)?;
        stage.finish(&[&out])?;
        return Ok(finish_with(&failures));
    }

    let (k, temperature) = match args.mode {
        Mode::Factual => (
            args.k.unwrap_or(cfg.factual_k),
            args.temperature.unwrap_or(cfg.factual_temperature),
        ),
        _ => (
            args.k.unwrap_or(cfg.counterfactual_k),
            args.temperature.unwrap_or(cfg.counterfactual_temperature),
        ),
    };
    anyhow::ensure!(k >= 1, "--k must be at least 1");
    let shots: Vec<ChainExemplar> = match &args.few_shots {
        Some(p) => {
            stage = stage.input(p)?;
            read(p)?
        }
        None => Vec::new(),
    };
    let interventions = match &args.intervened {
        Some(p) => {
            stage = stage.input(p)?;
            Some(accepted(p)?)
        }
        None => None,
    };
    let client = ctx.client()?;
    let model = ctx.model(&args.model, temperature, Some(seed));

    let sampled: Vec<SampledChains> = stream::iter(problems.iter())
        .map(|p| {
            let (client, model, shots, interventions) = (&client, &model, &shots, &interventions);
            async move {
                match (args.mode, interventions) {
                    (Mode::Counterfactual, Some(map)) => match map.get(&p.id) {
                        Some(pair) => sample_intervened_chains(client, p, pair, shots, k, model).await,
                        None => SampledChains::default(),
                    },
                    (mode, _) => {
                        let mode = if mode == Mode::Factual { ChainMode::Factual } else { ChainMode::Counterfactual };
                        let prompt = render_chain_prompt(p, mode, shots);
                        sample_chains(client, p, &prompt, mode.role(), k, model).await
                    }
                }
            }
        })
        .buffered(ctx.config.client.max_in_flight.max(1))
        .collect()
        .await;

    let mut chains = Vec::new();
    let mut failures = Vec::new();
    for s in sampled {
        chains.extend(s.chains);
        failures.extend(
            s.failures
                .into_iter()
                .map(|f| format!("{} sample {}: {}", f.problem_id, f.sample_index, f.error)),
        );
    }
    debug_assert!(chains.iter().all(|c| c.role != ChainRole::Irrelevant));
    validate_chains(&chains)?;
    write_jsonl(&out, &chains)?;
    eprintln!("{} chains written to {}", chains.len(), out.display());
    stage.model(&model).cache(client.stats()).finish(&[&out])?;
    Ok(finish_with(&failures))
}

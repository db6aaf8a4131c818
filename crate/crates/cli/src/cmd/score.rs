use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use cotmed::chains::{render_chain_prompt, ChainMode};
use cotmed::jsonl::{write_json, write_jsonl};
use cotmed::scores::{
    score_logprob_records, score_pair, summarize, LogprobRecord, ObjectiveWeights, PreferenceScoreInput, Reduction,
};
use cotmed::PreferencePair;

use super::{problems, read};
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Preference pairs to score live against the policy and reference.
    #[arg(long, conflicts_with = "logprobs", requires_all = ["problems", "policy", "reference"])]
    pairs: Option<PathBuf>,
    /// Problems the pairs refer to (for the scoring context).
    #[arg(long)]
    problems: Option<PathBuf>,
    /// Precomputed log-probabilities (no network).
    #[arg(long)]
    logprobs: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    /// Objective weights as `lm,counter,pref`.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<[f64; 3]>,
    /// Token reduction for live scoring: `sum` or `mean`.
    #[arg(long, value_parser = parse_reduction)]
    reduction: Option<Reduction>,
    /// Summary JSON; per-pair scores go next to it as `.pairs.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        other => Err(format!("unknown reduction `{other}` (sum or mean)")),
    }
}

fn parse_weights(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated weights".to_string())
}

pub async fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let beta = args.beta.unwrap_or(ctx.config.scores.beta);
    let mut weights: ObjectiveWeights = ctx.config.scores.weights;
    if let Some([lm, counter, pref]) = args.weights {
        weights.lambda_lm = lm;
        weights.lambda_counter = counter;
        weights.lambda_pref = pref;
    }
    weights.validate()?;
    let reduction = args.reduction.unwrap_or(ctx.config.scores.reduction);
    let out = args.out.clone().unwrap_or_else(|| run.path("reports", "scores.json"));
    let pairs_out = out.with_extension("pairs.jsonl");
    let mut stage = run.stage("score").config(&serde_json::json!({"beta": beta, "weights": weights, "reduction": reduction}));

    let scores = match (&args.logprobs, &args.pairs) {
        (Some(path), _) => {
            stage = stage.input(path)?;
            let records: Vec<LogprobRecord> = read(path)?;
            score_logprob_records(&records, beta, &weights)?
        }
        (None, Some(path)) => {
            let problems_path = args.problems.as_ref().expect("clap requires --problems");
            stage = stage.input(path)?.input(problems_path)?;
            let pairs: Vec<PreferencePair> = read(path)?;
            let problems: HashMap<String, _> = problems(problems_path)?.into_iter().map(|p| (p.id.clone(), p)).collect();
            let client = ctx.client()?;
            let policy = ctx.model(args.policy.as_deref().expect("clap requires --policy"), 0.0, None);
            let reference = ctx.model(args.reference.as_deref().expect("clap requires --reference"), 0.0, None);
            let mut scores = Vec::new();
            for pair in &pairs {
                let problem = problems
                    .get(&pair.problem_id)
                    .ok_or_else(|| anyhow::anyhow!("pair references unknown problem `{}`", pair.problem_id))?;
                let context = render_chain_prompt(problem, ChainMode::Factual, &[]).messages();
                let (w, l) = (&pair.preferred.text, &pair.dispreferred.text);
                let lp = |toks: Vec<f64>| reduction.apply(&toks);
                let input = PreferenceScoreInput {
                    lp_policy_w: lp(client.score_tokens(context.clone(), w, &policy).await?),
                    lp_policy_l: lp(client.score_tokens(context.clone(), l, &policy).await?),
                    lp_ref_w: lp(client.score_tokens(context.clone(), w, &reference).await?),
                    lp_ref_l: lp(client.score_tokens(context, l, &reference).await?),
                    beta,
                };
                scores.push(score_pair(&pair.problem_id, pair.dispreferred.role, &input)?);
            }
            stage = stage.model(&policy).model(&reference).cache(client.stats());
            scores
        }
        (None, None) => anyhow::bail!("pass --logprobs <file> or --pairs <file>"),
    };
    let summary = summarize(&scores, beta)?;
    write_jsonl(&pairs_out, &scores)?;
    write_json(&out, &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    stage.finish(&[&out, &pairs_out])?;
    Ok(ExitCode::SUCCESS)
}

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::ValueEnum;
use cotmed::effects::{compute_effects, table_from_records, EffectConfig, EffectMode, OutcomeRecord, PermutationMethod};
use cotmed::jsonl::write_json;
use cotmed::report::{percent, pvalue_bucket};

use super::read;
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Natural,
    Controlled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, default_value = "natural")]
    mode: Mode,
    #[arg(long)]
    resamples: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "auto")]
    method: Method,
    /// Task label for the report.
    #[arg(long, default_value = "task")]
    task: String,
    /// Evaluated model; required when the records hold several.
    #[arg(long)]
    model: Option<String>,
    /// Chain generator expected in controlled mode.
    #[arg(long)]
    controller: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let mut records: Vec<OutcomeRecord> = read(&args.records)?;
    let models: BTreeSet<String> = records.iter().map(|r| r.model.clone()).collect();
    let model = match (&args.model, models.len()) {
        (Some(m), _) => m.clone(),
        (None, 1) => models.into_iter().next().expect("one model"),
        (None, 0) => anyhow::bail!("{} has no records", args.records.display()),
        (None, _) => anyhow::bail!("records hold several models ({models:?}); pass --model"),
    };
    records.retain(|r| r.model == model);
    let table = table_from_records(&records)?;
    let mode = match args.mode {
        Mode::Natural => EffectMode::Natural,
        Mode::Controlled => EffectMode::Controlled,
    };
    let cfg = EffectConfig {
        resamples: args.resamples.unwrap_or(ctx.config.effects.resamples),
        seed: args.seed.unwrap_or(ctx.config.effects.seed),
        method: match args.method {
            Method::Auto => PermutationMethod::Auto,
            Method::Exact => PermutationMethod::Exact,
            Method::MonteCarlo => PermutationMethod::MonteCarlo,
        },
        controller: args.controller.clone(),
    };
    let report = compute_effects(&table, &args.task, &model, mode, &cfg)?;
    let out = args
        .out
        .unwrap_or_else(|| run.path("reports", &format!("effects_{}_{}.json", mode, super::file_stem(&model))));
    write_json(&out, &report)?;
    if !report.dropped.is_empty() {
        eprintln!("dropped incomplete items: {}", report.dropped.join(", "));
    }
    println!(
        "{} {} n={} {}={} (p {}) {}={} (p {}) flip={}",
        report.task,
        report.model,
        report.n,
        mode.ie_label(),
        percent(report.ie),
        pvalue_bucket(report.p_ie),
        mode.de_label(),
        percent(report.de),
        pvalue_bucket(report.p_de),
        report.flip_rate.map_or("-".to_string(), percent),
    );
    run.stage("effects")
        .input(&args.records)?
        .seed("permutation", cfg.seed)
        .config(&cfg)
        .finish(&[&out])?;
    Ok(ExitCode::SUCCESS)
}

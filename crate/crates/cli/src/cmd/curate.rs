use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::Utc;
use cotmed::intervene::{curate, CurationDecision, CurationStatus, InterventionPair, Verdict};
use cotmed::jsonl::{append_jsonl, write_jsonl};

use super::read;
use crate::run::Run;
use crate::Ctx;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Pending interventions; defaults to pending/interventions.jsonl.
    #[arg(long)]
    pending: Option<PathBuf>,
    /// Prerecorded decision log to apply.
    #[arg(long, conflicts_with = "review")]
    decisions: Option<PathBuf>,
    /// Review undecided items interactively (a = accept, r = reject,
    /// s = skip, q = quit); decisions are appended to the log.
    #[arg(long)]
    review: bool,
    /// Name recorded with interactive decisions.
    #[arg(long, env = "USER", default_value = "reviewer")]
    decider: String,
    /// Accepted interventions; defaults to curated/interventions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn review(pairs: &[InterventionPair], log: &std::path::Path, decider: &str) -> anyhow::Result<()> {
    let decided: Vec<CurationDecision> = if log.exists() { read(log)? } else { Vec::new() };
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    for p in pairs.iter().filter(|p| p.curation == CurationStatus::Pending) {
        if decided.iter().any(|d| d.original_id == p.original_id) {
            continue;
        }
        println!("\n[{}] {}\n  gold: {}", p.original_id, p.intervened_question, p.intervened_gold);
        let verdict = loop {
            print!("accept / reject / skip / quit [a/r/s/q]: ");
            std::io::stdout().flush()?;
            let Some(line) = lines.next() else { return Ok(()) };
            match line?.trim() {
                "a" => break Some(Verdict::Accept),
                "r" => break Some(Verdict::Reject),
                "s" => break None,
                "q" => return Ok(()),
                _ => continue,
            }
        };
        if let Some(verdict) = verdict {
            append_jsonl(
                log,
                &[CurationDecision {
                    original_id: p.original_id.clone(),
                    verdict,
                    decider: decider.to_string(),
                    timestamp: Utc::now(),
                }],
            )?;
        }
    }
    Ok(())
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let run = Run::open(&ctx.run)?;
    let pending_path = args.pending.unwrap_or_else(|| run.path("pending", "interventions.jsonl"));
    let pairs: Vec<InterventionPair> = read(&pending_path)?;
    let log = match (args.decisions, args.review) {
        (Some(path), _) => path,
        (None, true) => {
            let path = run.path("curated", "decisions.jsonl");
            review(&pairs, &path, &args.decider)?;
            path
        }
        (None, false) => anyhow::bail!("pass --decisions <log> or --review"),
    };
    let decisions: Vec<CurationDecision> = if log.exists() { read(&log)? } else { Vec::new() };
    let outcome = curate(&pairs, &decisions)?;
    let out = args.out.unwrap_or_else(|| run.path("curated", "interventions.jsonl"));
    write_jsonl(&out, &outcome.accepted)?;
    let pending = outcome.all.iter().filter(|p| p.curation == CurationStatus::Pending).count();
    eprintln!(
        "{} accepted, {} rejected, {} still pending",
        outcome.accepted.len(),
        outcome.all.len() - outcome.accepted.len() - pending,
        pending
    );
    let mut stage = run.stage("curate").input(&pending_path)?;
    if log.exists() {
        stage = stage.input(&log)?;
    }
    stage.finish(&[&out])?;
    Ok(ExitCode::SUCCESS)
}

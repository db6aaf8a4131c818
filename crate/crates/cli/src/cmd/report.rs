use std::path::PathBuf;
use std::process::ExitCode;

use clap::ValueEnum;
use cotmed::effects::{EffectMode, EffectReport};
use cotmed::jsonl::{write_atomic, write_json};
use cotmed::report::{effects_table, manifest as build_manifest};

use crate::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    Natural,
    Controlled,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Effect reports (JSON objects or arrays of them).
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "natural")]
    layout: Layout,
    /// Directory for `effects_<layout>.txt` and `.csv`; defaults to the run's reports/.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn run(ctx: &Ctx, args: Args) -> anyhow::Result<ExitCode> {
    let mut reports: Vec<EffectReport> = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.is_array() {
            reports.extend(serde_json::from_value::<Vec<EffectReport>>(value)?);
        } else {
            reports.push(serde_json::from_value(value)?);
        }
    }
    let layout = match args.layout {
        Layout::Natural => EffectMode::Natural,
        Layout::Controlled => EffectMode::Controlled,
    };
    let table = effects_table(&reports, layout)?;
    let dir = args.out_dir.unwrap_or_else(|| ctx.run.join("reports"));
    write_atomic(&dir.join(format!("effects_{layout}.txt")), table.text.as_bytes())?;
    write_atomic(&dir.join(format!("effects_{layout}.csv")), table.csv.as_bytes())?;
    print!("{}", table.text);
    Ok(ExitCode::SUCCESS)
}

pub fn manifest(ctx: &Ctx) -> anyhow::Result<ExitCode> {
    let m = build_manifest(&ctx.run)?;
    let path = ctx.run.join("manifest.json");
    write_json(&path, &m)?;
    for s in &m.stages {
        println!("{:<12} {:?} {}", s.stage, s.status, s.problems.join("; "));
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

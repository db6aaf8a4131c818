use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cotmed_mock::{MockScript, MockServer, ScoringScript};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, default_value = "127.0.0.1:8000")]
    addr: String,
    /// Script JSON; otherwise the synthetic responder with per-character scoring.
    #[arg(long)]
    script: Option<PathBuf>,
}

pub async fn run(args: Args) -> anyhow::Result<ExitCode> {
    let script = match &args.script {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => MockScript::synthetic().with_scoring(ScoringScript::PerChar { rate: 0.05 }),
    };
    let server = MockServer::bind(script, &args.addr).await?;
    println!("mock endpoint listening on {}", server.base_url());
    tokio::signal::ctrl_c().await?;
    println!("served {} requests", server.request_count());
    Ok(ExitCode::SUCCESS)
}

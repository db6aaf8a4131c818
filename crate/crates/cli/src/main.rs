mod cmd;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "cotmed", version, about = "Causal mediation analysis of chain-of-thought reasoning")]
struct Cli {
    /// TOML file overriding built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; outputs default to subdirectories of it.
    #[arg(long, global = true, default_value = "runs/default")]
    run: PathBuf,
    /// Completion cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Serve every request from the cache; a miss fails.
    #[arg(long, global = true)]
    offline: bool,
    /// Model endpoint base URL (OpenAI-compatible).
    #[arg(long, global = true, env = "COTMED_ENDPOINT")]
    endpoint: Option<String>,
    /// Upper bound on concurrent requests.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build intervened problems (LLM rewrite or operand swap).
    Intervene(cmd::intervene::Args),
    /// Apply accept/reject decisions to pending interventions.
    Curate(cmd::curate::Args),
    /// Sample factual, counterfactual or irrelevant reasoning chains.
    Chains(cmd::chains::Args),
    /// Query a model in the three outcome cells and grade the answers.
    Evaluate(cmd::evaluate::Args),
    /// Compute effects, flip rate and p-values from graded records.
    Effects(cmd::effects::Args),
    /// Evaluate preference and reasoner objectives.
    Score(cmd::score::Args),
    /// Leakage-adjusted simulatability of rationales.
    Las(cmd::las::Args),
    /// Render effect reports as a table and CSV.
    Report(cmd::report::Args),
    /// Summarize the run directory into manifest.json.
    Manifest,
    /// Serve the deterministic mock endpoint.
    MockServe(cmd::mock::Args),
}

pub struct Ctx {
    pub config: Config,
    pub run: PathBuf,
    pub endpoint: String,
}

impl Ctx {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let mut config = Config::load(cli.config.as_deref())?;
        if let Some(dir) = &cli.cache_dir {
            config.cache_dir = dir.clone();
        }
        if cli.offline {
            config.client.offline = true;
        }
        if let Some(n) = cli.max_in_flight {
            config.client.max_in_flight = n;
        }
        config.client.cache_dir = Some(config.cache_dir.clone());
        let endpoint = cli.endpoint.clone().unwrap_or_else(|| config.endpoint.clone());
        Ok(Self {
            config,
            run: cli.run.clone(),
            endpoint,
        })
    }

    pub fn client(&self) -> anyhow::Result<cotmed::client::Client> {
        Ok(cotmed::client::Client::new(self.config.client.clone())?)
    }

    pub fn model(&self, id: &str, temperature: f64, seed: Option<u64>) -> cotmed::ModelSpec {
        let mut spec = cotmed::ModelSpec::new(id, self.endpoint.clone()).with_temperature(temperature);
        spec.decoding.max_tokens = self.config.max_tokens;
        spec.decoding.seed = seed;
        spec
    }
}

async fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Intervene(a) => cmd::intervene::run(&ctx, a).await,
        Command::Curate(a) => cmd::curate::run(&ctx, a),
        Command::Chains(a) => cmd::chains::run(&ctx, a).await,
        Command::Evaluate(a) => cmd::evaluate::run(&ctx, a).await,
        Command::Effects(a) => cmd::effects::run(&ctx, a),
        Command::Score(a) => cmd::score::run(&ctx, a).await,
        Command::Las(a) => cmd::las::run(&ctx, a).await,
        Command::Report(a) => cmd::report::run(&ctx, a),
        Command::Manifest => cmd::report::manifest(&ctx),
        Command::MockServe(a) => cmd::mock::run(a).await,
    }
}

/// Error chain joined by `: `, skipping causes that a library error already
/// spelled out in its own message.
fn render_error(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use micro_cli::{pipeline, report, BacktestOptions, RunConfig};

#[derive(Parser)]
#[command(name = "micro", version, about = "Multi-interest candidate retrieval backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config value, e.g. `--set retrieval.m=[50,100]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; same as `--set output_dir=...`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Read the edge list, filter and subsample, and store the graph.
    Ingest(Common),
    /// Train user/item embeddings on the train period.
    Embed(Common),
    /// Cluster item embeddings into interests (or load given labels).
    Cluster(Common),
    /// Count train engagements per user and interest.
    Init(Common),
    /// Fit every held-out chunk and evaluate retrieval on the next one.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Run ingest/embed/cluster/init first when their outputs are missing.
        #[arg(long)]
        build_missing: bool,
    },
    /// Generate a synthetic dataset with known latent structure.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Directory for the generated files.
        #[arg(long, default_value = "synth")]
        dir: PathBuf,
    },
    /// Build comparison tables and per-chunk series from backtest metrics.
    Report(Common),
    /// Print the effective configuration.
    Config(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => {
            let stats = pipeline::ingest(&c.load()?)?;
            println!("{stats}");
        }
        Command::Embed(c) => pipeline::embed(&c.load()?)?,
        Command::Cluster(c) => pipeline::cluster(&c.load()?)?,
        Command::Init(c) => pipeline::init(&c.load()?)?,
        Command::Backtest { common, build_missing } => {
            let cfg = common.load()?;
            let reports = pipeline::backtest(&cfg, BacktestOptions { build_missing })?;
            for r in reports {
                println!(
                    "{}\tM={}\trecall={:.4}\tmrr={:.4}\tndcg={:.4}\tqueries={}",
                    r.method, r.m, r.overall.recall, r.overall.mrr, r.overall.ndcg, r.overall.queries
                );
            }
        }
        Command::Synth { common, dir } => {
            let path = pipeline::synth(&common.load()?, &dir)?;
            println!("{}", path.display());
        }
        Command::Report(c) => {
            let out = report::report(&c.load()?)?;
            print!("{}", out.rendered);
        }
        Command::Config(c) => print!("{}", c.load()?.to_toml()),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

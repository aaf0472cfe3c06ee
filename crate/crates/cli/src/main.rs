use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use pskv_cli::commands::{self, Outcome};
use pskv_cli::{parse_config, ReportFormat, RunConfig};
use pskv_core::CacheStrategy;

#[derive(Parser)]
#[command(name = "pskv", version, about = "Prefix-shared KV cache laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the seeded equivalence suite across cache strategies.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Corrupt one cached value so the suite must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Run a suffix search and write its report.
    Attack(Common),
    /// Sweep strategies × widths.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated widths, replacing `bench.widths`.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
    /// Check measured attention cells against the predictors over a grid.
    Complexity(Common),
    /// Print the effective configuration after defaults and overrides.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<CacheStrategy>,
    /// Overrides every run seed in the config.
    #[arg(long, env = "PSKV_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.strategy {
            cfg.strategy = s;
            cfg.bench.strategies = vec![s];
            cfg.complexity.strategies = vec![s];
        }
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(f) = self.format {
            cfg.format = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    Ok(match cli.cmd {
        Cmd::Verify {
            common,
            inject_fault,
        } => commands::verify(&common.load()?, inject_fault)?.1,
        Cmd::Attack(common) => commands::attack(&common.load()?)?.1,
        Cmd::Bench { common, widths } => {
            let mut cfg = common.load()?;
            if let Some(w) = widths {
                cfg.bench.widths = w;
                cfg.validate()?;
            }
            commands::bench(&cfg)?.1
        }
        Cmd::Complexity(common) => commands::complexity(&common.load()?)?.1,
        Cmd::Config(common) => {
            println!("{}", common.load()?.to_json());
            Outcome::Ok
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) => ExitCode::from(o.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Outcome::Failed.code())
        }
    }
}

use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mdner_cli::{cmd_eval, cmd_gridsearch, cmd_synth, cmd_tag, cmd_train, Baseline, ExperimentConfig, TagTarget};

#[derive(Parser)]
#[command(name = "mdner", version, about = "Multi-domain tagging on one frozen core")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    General,
    Specialized,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load(&self.config)?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth(Common),
    /// Train the core, both adapter phases and the router, or a baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
    },
    /// Tag CoNLL tokens from standard input.
    Tag {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "route")]
        domain: Option<String>,
        #[arg(long)]
        route: bool,
        /// Bundle to use instead of the config's first multi-domain bundle.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Per-domain F1 table over every trained model.
    Eval(Common),
    /// Coarse-to-fine adapter hyperparameter search.
    Gridsearch(Common),
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::Synth(c) => {
            for p in cmd_synth(&c.load()?)? {
                writeln!(out, "{}", p.display())?;
            }
        }
        Command::Train { common, baseline } => {
            let baseline = baseline.map(|b| match b {
                BaselineArg::General => Baseline::General,
                BaselineArg::Specialized => Baseline::Specialized,
            });
            for p in cmd_train(&common.load()?, baseline)?.outputs {
                writeln!(out, "{}", p.display())?;
            }
        }
        Command::Tag {
            common,
            domain,
            route,
            bundle,
        } => {
            let target = match (domain, route) {
                (Some(d), false) => TagTarget::Domain(d),
                (None, true) => TagTarget::Route,
                _ => bail!("tag needs exactly one of --domain D or --route"),
            };
            let stdin = io::stdin();
            cmd_tag(&common.load()?, bundle.as_deref(), &target, stdin.lock(), &mut out)?;
        }
        Command::Eval(c) => {
            write!(out, "{}", cmd_eval(&c.load()?)?.render())?;
        }
        Command::Gridsearch(c) => {
            let r = cmd_gridsearch(&c.load()?)?;
            for (p, s) in &r.table {
                writeln!(out, "{p:?}\t{s:.4}")?;
            }
            writeln!(out, "best {:?} {:.4}", r.best, r.best_score)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

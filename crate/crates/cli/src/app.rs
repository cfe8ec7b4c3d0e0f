//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgb::gradcheck::GradcheckConfig;

use crate::ablate::{cmd_ablate, AblateOptions};
use crate::commands::{cmd_eval, cmd_export_embeddings, cmd_gradcheck, cmd_train};
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dgb", version, about = "Bootstrapped self-supervised graph encoders")]
pub struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_defaults: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an encoder and write its checkpoint and loss curve.
    Train(RunArgs),
    /// Linear-probe evaluation of a checkpoint or of the raw features.
    Eval {
        /// Checkpoint written by `train`.
        checkpoint: Option<PathBuf>,
        /// Evaluate the row-normalized input features instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        raw: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the dropout sweep and the ablation grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 12)]
        nodes: usize,
        #[arg(long, default_value_t = 7)]
        in_dim: usize,
        #[arg(long, default_value_t = 5)]
        out_dim: usize,
        /// Directory for `gradcheck.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write clean-graph embeddings of every node as TSV.
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for training and probes. For `ablate` it replaces the seed list.
    #[arg(long)]
    pub seed: Option<u64>,
}

struct Resolved {
    config: ExperimentConfig,
    dataset: PathBuf,
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve_dataset(flag: Option<PathBuf>, config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| config.dataset.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --dataset or set `dataset` in the config".into()))
}

fn resolve(args: RunArgs) -> Result<Resolved, CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
        config.eval.seed = seed;
        config.ablation.seeds = vec![seed];
        config.ablation.sweep_seed = None;
    }
    let dataset = resolve_dataset(args.dataset, &config)?;
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `output_dir` in the config".into()))?;
    Ok(Resolved { config, dataset, out })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no command given; see `dgb --help`".into()));
    };
    match command {
        Command::Train(args) => {
            let r = resolve(args)?;
            let s = cmd_train(&r.config, &r.dataset, &r.out)?;
            println!(
                "trained {} epochs on {} ({}), final loss {:.6}; outputs in {}",
                s.epochs_run,
                s.dataset,
                s.view_pair,
                s.final_loss,
                r.out.display()
            );
        }
        Command::Eval { checkpoint, raw, run } => {
            if checkpoint.is_none() && !raw {
                return Err(CliError::Usage("eval needs a checkpoint or --raw".into()));
            }
            let r = resolve(run)?;
            let s = cmd_eval(&r.config, &r.dataset, checkpoint.as_deref(), &r.out)?;
            println!(
                "{} on {}: accuracy {:.4} ± {:.4} over {} probes",
                s.source,
                s.dataset,
                s.report.mean,
                s.report.std,
                s.report.runs.len()
            );
        }
        Command::Ablate { run, jobs } => {
            let r = resolve(run)?;
            let outcome = cmd_ablate(
                &r.config,
                &r.dataset,
                &r.out,
                AblateOptions {
                    workers: jobs,
                    progress: true,
                },
            )?;
            for c in &outcome.cells {
                match (c.mean, c.std) {
                    (Some(m), Some(s)) => println!("{:<44} {m:.4} ± {s:.4}", c.cell),
                    _ => println!("{:<44} failed", c.cell),
                }
            }
        }
        Command::Gradcheck {
            seed,
            instances,
            nodes,
            in_dim,
            out_dim,
            out,
        } => {
            let cfg = GradcheckConfig {
                seed,
                instances,
                nodes,
                in_dim,
                out_dim,
                ..GradcheckConfig::default()
            };
            cmd_gradcheck(&cfg, out.as_deref())?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            config,
            dataset,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = resolve_dataset(dataset, &cfg)?;
            let n = cmd_export_embeddings(&checkpoint, &dataset, &out)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
    }
    Ok(())
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

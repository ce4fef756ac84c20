//! `hiermatch` command line: dataset generation, training, evaluation,
//! merge tracing and ablation tables.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiermatch::config::{KeyValues, RunConfig};
use hiermatch::data::format::{read_dataset, write_dataset};
use hiermatch::data::{generate, DetailLevel, SyntheticSpec};
use hiermatch::harness::{self, AblationMode};
use hiermatch::{checkpoint, Branch, Error};

#[derive(Parser)]
#[command(name = "hiermatch", version, about = "Hierarchical cross-modal sketch/photo matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint after every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out if there is one.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        modes: ModeArgs,
    },
    /// Rank test photos for every test sketch.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reject the checkpoint unless it was trained with this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: String,
        /// `independent` embeds queries and photos separately; `paired`
        /// embeds every query/photo pair jointly, with co-attention.
        #[arg(long, default_value = "independent")]
        protocol: String,
        /// Also write per-query ranks as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the greedy merge trace of one record.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        identity: u32,
        #[arg(long, default_value = "sketch")]
        modality: String,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Train and evaluate every requested mode; prints a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_coattn,no_hierarchy,explicit,coarse,coarse++")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModeArgs {
    #[arg(long)]
    no_coattn: bool,
    #[arg(long)]
    no_hierarchy: bool,
    #[arg(long)]
    explicit_hierarchy: bool,
}

/// An error tagged with the exit code it maps to.
struct Failure(u8, String);

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure(2, e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Checkpoint(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        };
        Failure(code, e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: &Path, modes: Option<&ModeArgs>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::read(path).map_err(Failure::config)?;
    if let Some(m) = modes {
        let f = &mut cfg.model.modes;
        f.no_coattn |= m.no_coattn;
        f.no_hierarchy |= m.no_hierarchy;
        f.explicit_hierarchy |= m.explicit_hierarchy;
        cfg.validate().map_err(Failure::config)?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure(3, format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { spec, out } => {
            let kv = KeyValues::read(&spec).map_err(Failure::config)?;
            let spec = SyntheticSpec::from_kv(&kv).map_err(Failure::config)?;
            let ds = generate(&spec)?;
            write_dataset(&ds, &out)?;
            println!(
                "wrote {} records ({} train / {} test identities) to {}",
                ds.records.len(),
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            modes,
        } => {
            let cfg = load_config(&config, Some(&modes))?;
            let ds = read_dataset(&data)?;
            println!("config {}  {}", cfg.fingerprint(), harness::build_fingerprint());
            println!("epoch,loss");
            let (state, reason) = harness::train(&cfg, &ds, Some(&out), resume, |epoch, loss| {
                println!("{epoch},{loss:.6e}");
            })?;
            let why = match reason {
                harness::StopReason::EpochBudget => "epoch budget reached",
                harness::StopReason::Plateau => "loss plateau",
            };
            println!("stopped after {} epochs ({why}); checkpoint in {}", state.epoch, out.display());
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            config,
            variant,
            protocol,
            csv,
        } => {
            let variant: DetailLevel = variant.parse().map_err(Failure::config)?;
            let protocol: harness::Protocol = protocol.parse().map_err(Failure::config)?;
            let state = checkpoint::load(&ckpt)?;
            if let Some(path) = config {
                let cfg = load_config(&path, None)?;
                if cfg.model != state.run.model {
                    return Err(Failure::config(format!(
                        "checkpoint model config {} does not match {}",
                        state.run.fingerprint(),
                        path.display()
                    )));
                }
            }
            let ds = read_dataset(&data)?;
            let mut report = harness::evaluate_with(&state.model, &ds, variant, protocol)?;
            report.config_fingerprint = state.run.fingerprint();
            print!("{}", report.to_text());
            if let Some(path) = csv {
                write_file(&path, &report.to_csv())?;
            }
        }
        Command::Trace {
            checkpoint: ckpt,
            data,
            identity,
            modality,
            variant,
        } => {
            let branch: Branch = modality.parse().map_err(Failure::config)?;
            let variant: DetailLevel = variant.parse().map_err(Failure::config)?;
            let state = checkpoint::load(&ckpt)?;
            let ds = read_dataset(&data)?;
            let record = match branch {
                Branch::Photo => ds.photo(identity),
                Branch::Sketch => ds.sketch(identity, variant),
            }
            .ok_or_else(|| Failure(3, format!("no {branch} record for identity {identity} ({variant})")))?;
            let report = harness::trace_record(&state.model, record)?;
            print!("{}", report.to_text());
        }
        Command::Ablate {
            config,
            data,
            modes,
            seeds,
            csv,
        } => {
            let cfg = load_config(&config, None)?;
            let modes = modes
                .iter()
                .map(|m| m.parse::<AblationMode>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::config)?;
            let ds = read_dataset(&data)?;
            let table = harness::ablate(&cfg, &ds, &modes, &seeds, |msg| eprintln!("{msg}"));
            print!("{}", table.to_text());
            if let Some(path) = csv {
                write_file(&path, &table.to_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dsne::data::Domain;
use dsne::experiment::{self, exit, DatasetSpec, Role, SplitPart};
use dsne::gradcheck::{self, GradcheckOptions};
use dsne::{trainer, Error, Result};

/// Few-shot supervised domain adaptation with d-SNE.
#[derive(Debug, Parser)]
#[command(name = "dsne", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a JSON config (or replay a run's manifest.json).
    Train { config: PathBuf },
    /// Print {"accuracy": a} of a checkpoint on a dataset.
    Eval {
        ckpt: PathBuf,
        /// `mnist:IMAGES,LABELS` or `usps:PATH[,PATH...]`
        dataset: String,
        #[arg(long, value_enum, default_value_t = NetworkArg::Target)]
        network: NetworkArg,
        /// Restrict the dataset with a run's split.json.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SubsetArg::Eval, requires = "split")]
        subset: SubsetArg,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write per-sample embeddings as CSV.
    ExportEmbeddings {
        ckpt: PathBuf,
        dataset: String,
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = NetworkArg::Target)]
        network: NetworkArg,
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NetworkArg {
    Source,
    Target,
}

impl From<NetworkArg> for Role {
    fn from(n: NetworkArg) -> Self {
        match n {
            NetworkArg::Source => Role::Source,
            NetworkArg::Target => Role::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubsetArg {
    Eval,
    Labeled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config } => {
            let cfg = experiment::load_run_config(&config)?;
            let out = experiment::run_training(&cfg)?;
            if let Some(last) = out.history.last() {
                eprintln!("{}", last.to_json_line());
            }
            println!("{}", out.dir.display());
            Ok(exit::OK)
        }
        Command::Eval {
            ckpt,
            dataset,
            network,
            split,
            subset,
        } => {
            let spec: DatasetSpec = dataset.parse()?;
            let nets = experiment::load_networks(&ckpt)?;
            let mut ds = experiment::load_for(&nets, &spec, Domain::Target)?;
            if let Some(split) = split {
                let part = match subset {
                    SubsetArg::Eval => SplitPart::Eval,
                    SubsetArg::Labeled => SplitPart::Labeled,
                };
                ds = experiment::restrict_to_split(&ds, &split, part)?;
            }
            let acc = trainer::evaluate(experiment::select_network(&nets, network.into()), &ds)?;
            println!("{}", serde_json::json!({ "accuracy": acc }));
            Ok(exit::OK)
        }
        Command::Gradcheck { seed, inject_fault } => {
            let reports = gradcheck::run_gradcheck(&GradcheckOptions { seed, inject_fault })?;
            let mut failed = Vec::new();
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<32} {:>10.3e}  {:>5} checks  {status}", r.component, r.worst_rel_error, r.checks);
                if !r.passed() {
                    failed.push(r.component.as_str());
                }
            }
            if failed.is_empty() {
                Ok(exit::OK)
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(exit::CHECK_FAILED)
            }
        }
        Command::ExportEmbeddings {
            ckpt,
            dataset,
            out,
            network,
            domain,
        } => {
            let spec: DatasetSpec = dataset.parse()?;
            let nets = experiment::load_networks(&ckpt)?;
            let domain = match domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            let ds = experiment::load_for(&nets, &spec, domain)?;
            trainer::export_embeddings(experiment::select_network(&nets, network.into()), &ds, &out)?;
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = run(cli).unwrap_or_else(|e: Error| {
        eprintln!("error: {e}");
        experiment::exit_code(&e)
    });
    ExitCode::from(code as u8)
}

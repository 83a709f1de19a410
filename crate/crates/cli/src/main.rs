use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfc_cli::config::DEFAULT_OUT_ROOT;
use mfc_cli::{ablate, load, run, Overrides, ProblemKind, RunError, Scale};
use mfc_core::embed::EmbeddingMethod;

/// Train population-dependent controls for mean-field control problems.
#[derive(Parser)]
#[command(name = "mfc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write its artifacts.
    Run(Common),
    /// Train one policy per combination of swept values.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Embeddings to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep_embedding: Option<Vec<EmbeddingMethod>>,
        /// Histogram bin counts to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep_nbin: Option<Vec<usize>>,
        /// Learning rates to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep_lr: Option<Vec<f64>>,
        /// Seeds to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep_seed: Option<Vec<u64>>,
    },
    /// Print the resolved configuration without running it.
    Resolve(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML); presets fill in everything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<ProblemKind>,
    /// desk or full.
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long)]
    embedding: Option<EmbeddingMethod>,
    /// Histogram bins per state dimension.
    #[arg(long)]
    nbin: Option<usize>,
    /// Number of clipped moments.
    #[arg(long)]
    nmom: Option<usize>,
    /// Training population size N.
    #[arg(long)]
    particles: Option<usize>,
    /// Number of SGD iterations K.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory of this run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parent of the default output directory.
    #[arg(long, env = "MFC_OUT", default_value = DEFAULT_OUT_ROOT)]
    out_root: PathBuf,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            problem: self.problem,
            scale: self.scale,
            embedding: self.embedding,
            nbin: self.nbin,
            nmom: self.nmom,
            particles: self.particles,
            iters: self.iters,
            lr: self.lr,
            seed: self.seed,
            out: self.out.clone(),
            out_root: Some(self.out_root.clone()),
            ..Default::default()
        }
    }
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(common) => {
            let config = load(common.config.as_deref(), &common.overrides())?;
            let summary = run(&config)?;
            println!(
                "{}: validation cost {} -> {} ({} artifacts)",
                summary.dir.display(),
                summary.initial_validation,
                summary.final_validation,
                summary.manifest.len()
            );
        }
        Command::Ablate {
            common,
            sweep_embedding,
            sweep_nbin,
            sweep_lr,
            sweep_seed,
        } => {
            let overrides = Overrides {
                sweep_embedding,
                sweep_nbin,
                sweep_lr,
                sweep_seed,
                ..common.overrides()
            };
            for row in ablate(common.config.as_deref(), &overrides)? {
                match row.final_validation {
                    Some(v) => println!("{}: final validation cost {v}", row.run),
                    None => println!("{}: diverged", row.run),
                }
            }
        }
        Command::Resolve(common) => {
            let config = load(common.config.as_deref(), &common.overrides())?;
            print!("{}", config.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

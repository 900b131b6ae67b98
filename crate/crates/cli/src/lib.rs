//! Command-line pipeline around `vasg-core`.
//!
//! ```text
//! vasg synth     planted-cluster dataset
//! vasg prepare   filter, split, summary stats
//! vasg train     embeddings + decoder, per-epoch loss history
//! vasg map       cold-start encoder against the frozen decoder
//! vasg evaluate  report.json, histograms, PCA export
//! vasg recommend top-k for a user, or an analogy query, as CSV
//! ```

pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Overrides, PipelineConfig};
pub use error::{CliError, ErrorKind};
use pipeline::Query;

#[derive(Debug, Parser)]
#[command(name = "vasg", version, about = "Visually-aware skip-gram recommender pipeline")]
pub struct Cli {
    /// TOML configuration; defaults apply to anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for walks and evaluation (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Train plain skip-gram without the feature decoder.
    #[arg(long, global = true)]
    pub no_decoder: bool,
    /// Mapper input noise, relative to the per-dimension feature std.
    #[arg(long, global = true, value_name = "S")]
    pub noise: Option<f64>,
    /// Negative samples per positive pair.
    #[arg(long, global = true, value_name = "K")]
    pub negatives: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-cluster dataset.
    Synth {
        /// Target directory; defaults to the directory of `paths.interactions`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter short histories, split warm/cold, write stats.
    Prepare,
    /// Train embeddings and the feature decoder.
    Train,
    /// Fit the cold-start encoder through the frozen decoder.
    Map,
    /// Write report.json, similarity histograms and a PCA export.
    Evaluate,
    /// Print recommendations as CSV on stdout.
    Recommend {
        #[arg(long, required_unless_present = "analogy", conflicts_with = "analogy")]
        user: Option<String>,
        /// Analogy query: products near `x_p1 - x_u1 + x_u2`.
        #[arg(long, num_args = 3, value_names = ["P1", "U1", "U2"])]
        analogy: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            no_decoder: self.no_decoder,
            noise: self.noise,
            negatives: self.negatives,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        cfg.apply(&self.overrides());
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.pipeline_config()?;
    match &cli.command {
        Command::Synth { out } => {
            let dir = match out {
                Some(d) => d.clone(),
                None => cfg.interactions_path().parent().map(PathBuf::from).unwrap_or_default(),
            };
            pipeline::cmd_synth(&cfg, &dir)
        }
        Command::Prepare => pipeline::cmd_prepare(&cfg).map(drop),
        Command::Train => pipeline::cmd_train(&cfg).map(drop),
        Command::Map => pipeline::cmd_map(&cfg).map(drop),
        Command::Evaluate => pipeline::cmd_evaluate(&cfg).map(drop),
        Command::Recommend { user, analogy, k } => {
            let query = match (user, analogy) {
                (Some(user), _) => Query::User { user: user.clone(), k: *k },
                (None, Some(t)) => Query::Analogy {
                    p1: t[0].clone(),
                    u1: t[1].clone(),
                    u2: t[2].clone(),
                    k: *k,
                },
                (None, None) => unreachable!("clap requires one of --user / --analogy"),
            };
            pipeline::cmd_recommend(&cfg, &query, std::io::stdout().lock())
        }
    }
}

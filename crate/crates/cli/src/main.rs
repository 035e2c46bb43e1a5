//! `graphmask` — train a relational GNN on the star-graph task, learn
//! amortized edge gates over it, run baseline attribution methods, and
//! evaluate everything for faithfulness, stability, and degradation.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` JSON file, the `GRAPHMASK_OUT` environment variable (output
//! root only), then command-line flags.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 the gate
//! training never satisfied the divergence constraint, 4 any other failure.

mod commands;
mod config;
mod error;
mod pipeline;
mod render;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use graphmask_core::error::Error;

use crate::config::{parse_index_list, Method, RunConfig, Split};
use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "graphmask",
    version,
    about = "Amortized differentiable edge masking for GNN interpretability",
    propagate_version = true
)]
struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output root (overrides $GRAPHMASK_OUT, which overrides the config file)
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Seed for data generation, model training, and the primary explainer
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the star-graph dataset and write its three JSONL splits
    Generate {
        /// Total number of examples across all splits
        #[arg(long)]
        count: Option<usize>,
        /// Number of edge colors (relations)
        #[arg(long)]
        num_colors: Option<usize>,
    },
    /// Train the relational GNN on the generated dataset
    TrainModel {
        /// Learning rate
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Stop once validation accuracy reaches this level
        #[arg(long)]
        target_accuracy: Option<f64>,
    },
    /// Train the amortized gate classifier against the frozen model
    TrainGraphmask {
        /// Divergence tolerance the constrained objective must satisfy
        #[arg(long)]
        beta: Option<f64>,
        /// Gate-classifier learning rate
        #[arg(long)]
        lr: Option<f64>,
        /// Ascent rate for the Lagrange multiplier
        #[arg(long)]
        lambda_lr: Option<f64>,
        /// Coefficient on the expected-L0 sparsity term
        #[arg(long)]
        penalty_scaling: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Epochs between enabling each successive layer (top-down)
        #[arg(long)]
        delta: Option<usize>,
        /// Epoch budget once every layer is enabled
        #[arg(long)]
        max_epochs_after_full: Option<usize>,
        /// Hidden width of the gate MLP (defaults to the model's state size)
        #[arg(long)]
        gate_hidden_dim: Option<usize>,
        /// Temperature of the gate distribution
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Compute amortized or non-amortized gate attributions for a split
    Explain {
        /// One of: graphmask, nonamortized
        #[arg(long, default_value = "graphmask")]
        method: Method,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the attribution file here instead of the default location
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compute a baseline attribution method for a split
    Baseline {
        /// One of: erasure, gnnexplainer, ig, ib
        #[arg(long)]
        method: Method,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Write the attribution file here instead of the default location
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score saved attribution files: faithfulness, per-layer mass, degradation
    Evaluate {
        /// Comma-separated subset of methods to evaluate
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Compare two or more attribution files side by side
    Compare {
        /// Attribution files to compare
        #[arg(num_args = 2.., required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Render attributed examples as SVG star diagrams
    Render {
        /// Attribution file (defaults to the saved graphmask attributions)
        #[arg(long, value_name = "FILE")]
        attributions: Option<PathBuf>,
        /// Example ids: a comma list ("0,3,7") or a range ("0..5", inclusive)
        #[arg(long)]
        ids: String,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Run every stage end to end and write the full report
    Pipeline {
        /// Total number of examples across all splits
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated methods to run (default: all six)
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Stability seeds: a comma list or a range ("0..4", inclusive)
        #[arg(long)]
        seeds: Option<String>,
        /// Number of test examples to render per method
        #[arg(long)]
        render_count: Option<usize>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var("GRAPHMASK_OUT") {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                cfg.$field = v;
            }
        };
    }

    match cli.cmd {
        Cmd::Generate { count, num_colors } => {
            set!(count, count);
            set!(num_colors, num_colors);
            cfg.validate()?;
            commands::generate(&cfg)?;
            Ok(())
        }
        Cmd::TrainModel { lr, batch_size, max_epochs, target_accuracy } => {
            set!(model_lr, lr);
            set!(model_batch_size, batch_size);
            set!(model_max_epochs, max_epochs);
            set!(target_accuracy, target_accuracy);
            cfg.validate()?;
            let splits = commands::load_splits(&cfg)?;
            commands::train_model(&cfg, &splits)?;
            Ok(())
        }
        Cmd::TrainGraphmask {
            beta,
            lr,
            lambda_lr,
            penalty_scaling,
            batch_size,
            delta,
            max_epochs_after_full,
            gate_hidden_dim,
            tau,
        } => {
            set!(beta, beta);
            set!(lr, lr);
            set!(lambda_lr, lambda_lr);
            set!(penalty_scaling, penalty_scaling);
            set!(batch_size, batch_size);
            set!(delta_epochs, delta);
            set!(max_epochs_after_full, max_epochs_after_full);
            if gate_hidden_dim.is_some() {
                cfg.gate_hidden_dim = gate_hidden_dim;
            }
            set!(tau, tau);
            cfg.validate()?;
            commands::train_graphmask_cmd(&cfg)?;
            Ok(())
        }
        Cmd::Explain { method, split, out } => {
            cfg.validate()?;
            commands::explain_cmd(&cfg, method, split, out.as_deref())?;
            Ok(())
        }
        Cmd::Baseline { method, split, out } => {
            cfg.validate()?;
            commands::baseline_cmd(&cfg, method, split, out.as_deref())?;
            Ok(())
        }
        Cmd::Evaluate { methods, split } => {
            set!(methods, methods);
            cfg.validate()?;
            commands::evaluate_cmd(&cfg, &cfg.methods, split)?;
            Ok(())
        }
        Cmd::Compare { files, split } => {
            cfg.validate()?;
            commands::compare_cmd(&cfg, &files, split)?;
            Ok(())
        }
        Cmd::Render { attributions, ids, split, out_dir } => {
            cfg.validate()?;
            let ids: Vec<usize> = parse_index_list(&ids)
                .map_err(Error::Config)?
                .into_iter()
                .map(|id| id as usize)
                .collect();
            commands::render_cmd(&cfg, attributions.as_deref(), &ids, split, out_dir.as_deref())?;
            Ok(())
        }
        Cmd::Pipeline { count, methods, seeds, render_count } => {
            set!(count, count);
            set!(methods, methods);
            if let Some(s) = seeds {
                cfg.seeds = parse_index_list(&s).map_err(Error::Config)?;
            }
            set!(render_count, render_count);
            cfg.validate()?;
            pipeline::pipeline_cmd(&cfg)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

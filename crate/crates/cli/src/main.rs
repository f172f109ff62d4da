use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tqsim_cli::commands;

/// Quantization analysis toolkit for transformer activation dumps and the
/// bundled encoder simulator.
#[derive(Parser)]
#[command(name = "tqsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flag activation cells beyond a sigma threshold and count hits per
    /// embedding dimension.
    Outliers {
        /// Rank-3 activation dump (sequences, tokens, dims).
        #[arg(long)]
        input: PathBuf,
        /// Threshold in standard deviations.
        #[arg(long, default_value_t = 6.0)]
        sigma: f64,
        /// Pool statistics over all sequences instead of per sequence.
        #[arg(long)]
        pooled: bool,
        /// Flagged-cell CSV.
        #[arg(long)]
        out: PathBuf,
        /// Per-dimension hit-count CSV (default: `<out>.dims.csv`).
        #[arg(long)]
        dims_out: Option<PathBuf>,
    },
    /// Per-token min/max over the embedding dimensions.
    TokenRanges {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a grouped-quantization plan from calibration activations.
    PegPlan {
        #[arg(long)]
        input: PathBuf,
        /// Number of groups; must divide the embedding width.
        #[arg(long)]
        k: usize,
        /// Skip the range-based permutation and keep contiguous groups.
        #[arg(long)]
        no_permute: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate quantizer ranges for a model over calibration sequences
    /// and write the finalized configuration.
    EstimateRanges {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qconfig: PathBuf,
        /// Rank-2 token-id tensor (sequences, positions).
        #[arg(long)]
        data: PathBuf,
        /// Sequences per calibration batch.
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fake-quantized model and report per-site error and the
    /// task metric.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Configuration with finalized ranges (see estimate-ranges).
        #[arg(long)]
        qconfig: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Directory for per-site tensor dumps.
        #[arg(long)]
        dump_sites: Option<PathBuf>,
        /// Optional per-site metric CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-out ablation over named activation-site groups.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        qconfig: PathBuf,
        /// Calibration token tensor.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation token tensor (defaults to the calibration data).
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Comma-separated group names.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fake-quantize one tensor file and write the simulated result.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[arg(long)]
        symmetric: bool,
        /// minmax or mse.
        #[arg(long, default_value = "minmax")]
        estimator: String,
        /// per-tensor, per-embedding, or peg.
        #[arg(long, default_value = "per-tensor")]
        granularity: String,
        /// Group count for peg granularity.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Apply the range-based permutation for peg granularity.
        #[arg(long)]
        permute: bool,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON dump of the derived quantizer parameters.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> tqsim_cli::Result<()> {
    match cli.command {
        Command::Outliers {
            input,
            sigma,
            pooled,
            out,
            dims_out,
        } => commands::cmd_outliers(&input, sigma, pooled, &out, dims_out.as_deref()),
        Command::TokenRanges { input, out } => commands::cmd_token_ranges(&input, &out),
        Command::PegPlan {
            input,
            k,
            no_permute,
            out,
        } => commands::cmd_peg_plan(&input, k, !no_permute, &out),
        Command::EstimateRanges {
            model,
            qconfig,
            data,
            batch_size,
            out,
        } => commands::cmd_estimate_ranges(&model, &qconfig, &data, batch_size, &out),
        Command::Simulate {
            model,
            qconfig,
            input,
            dump_sites,
            out,
        } => commands::cmd_simulate(
            &model,
            &qconfig,
            &input,
            dump_sites.as_deref(),
            out.as_deref(),
        ),
        Command::Ablate {
            model,
            qconfig,
            data,
            eval,
            groups,
            batch_size,
            out,
        } => commands::cmd_ablate(
            &model,
            &qconfig,
            &data,
            eval.as_deref(),
            &groups,
            batch_size,
            &out,
        ),
        Command::Quantize {
            input,
            bits,
            symmetric,
            estimator,
            granularity,
            k,
            permute,
            out,
            params_out,
        } => commands::cmd_quantize(
            &input,
            bits,
            symmetric,
            &estimator,
            &granularity,
            k,
            permute,
            &out,
            params_out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

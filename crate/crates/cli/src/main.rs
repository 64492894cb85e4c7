use clap::{Args, Parser, Subcommand};
use pae_cli::commands::{self, CmdError, InvertMode, LatentSide};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pae",
    about = "Paired autoencoders for inverse problems: training, inversion, OOD scoring, sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "pae-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write a checkpoint.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory override (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direct estimates or latent-space inversion for an observation file.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX observations.
        #[arg(long)]
        data: PathBuf,
        /// Optional IDX ground truth (enables rel_err/ssim reporting).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Optional IDX per-sample 0/1 masks (the known forward operator).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// One-shot direct estimate.
        #[arg(long, conflicts_with = "lsi")]
        direct: bool,
        /// Latent-space inversion.
        #[arg(long)]
        lsi: bool,
        /// Start LSI from zero instead of the warm start.
        #[arg(long, requires = "lsi")]
        cold: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a metric baseline and score probes for OOD behavior.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX observations defining the baseline distribution.
        #[arg(long)]
        baseline: PathBuf,
        /// IDX observations to score.
        #[arg(long)]
        probe: PathBuf,
        /// Scatter metric pair, 1-based (default "1,3").
        #[arg(long, default_value = "1,3")]
        pair: String,
        #[command(flatten)]
        common: Common,
    },
    /// Decoded posterior samples from a variational checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per probe.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Latent coordinates of a dataset, one CSV row per sample.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional IDX labels joined as a final column.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Which encoder to use: x or y.
        #[arg(long, default_value = "x")]
        side: String,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), CmdError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(CmdError::Usage(format!("bad --pair {s:?}, expected i,j")));
    }
    let a: usize = parts[0]
        .trim()
        .parse()
        .map_err(|_| CmdError::Usage(format!("bad --pair {s:?}")))?;
    let b: usize = parts[1]
        .trim()
        .parse()
        .map_err(|_| CmdError::Usage(format!("bad --pair {s:?}")))?;
    if a == 0 || b == 0 || a > 5 || b > 5 {
        return Err(CmdError::Usage("--pair indices must be in 1..=5".into()));
    }
    Ok((a - 1, b - 1))
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Train { config, seed, out } => commands::cmd_train(&config, seed, out),
        Command::Invert {
            checkpoint,
            data,
            truth,
            mask,
            direct,
            lsi,
            cold,
            common,
        } => {
            let mode = match (direct, lsi) {
                (true, false) => InvertMode::Direct,
                (false, true) => InvertMode::Lsi { cold },
                _ => {
                    return Err(CmdError::Usage(
                        "exactly one of --direct or --lsi is required".into(),
                    ))
                }
            };
            commands::cmd_invert(
                &checkpoint,
                &data,
                truth.as_deref(),
                mask.as_deref(),
                mode,
                common.seed,
                &common.out,
            )
        }
        Command::Ood {
            checkpoint,
            baseline,
            probe,
            pair,
            common,
        } => {
            let pair = parse_pair(&pair)?;
            commands::cmd_ood(&checkpoint, &baseline, &probe, pair, &common.out)
        }
        Command::Sample {
            checkpoint,
            data,
            count,
            common,
        } => commands::cmd_sample(&checkpoint, &data, count, common.seed, &common.out),
        Command::ExportLatents {
            checkpoint,
            data,
            labels,
            side,
            common,
        } => {
            let side = match side.as_str() {
                "x" => LatentSide::X,
                "y" => LatentSide::Y,
                other => {
                    return Err(CmdError::Usage(format!(
                        "--side must be x or y, got {other:?}"
                    )))
                }
            };
            commands::cmd_export_latents(
                &checkpoint,
                &data,
                labels.as_deref(),
                side,
                &common.out,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

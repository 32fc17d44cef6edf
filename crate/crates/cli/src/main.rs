use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Encode images into per-layer style codes, edit and mix them, and train the encoder.
#[derive(Parser)]
#[command(name = "wplus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes metrics.csv and checkpoints into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Total step count, overriding the config (useful with --resume).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Invert an image and write the reconstruction.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codes_out: Option<PathBuf>,
    },
    /// Render an image from a codes file.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert, shift the codes along a direction and render.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codes_out: Option<PathBuf>,
    },
    /// Invert two images and render A's codes with the listed layers taken from B.
    Mix {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Exactly two images, A then B.
        #[arg(long = "in", num_args = 1, required = true)]
        input: Vec<PathBuf>,
        /// Layer list such as `8-13` or `8,9,10`; empty for none.
        #[arg(long, value_parser = parse_layers)]
        layers: Layers,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade an image by a downsampling factor, then invert it.
    SuperResolve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grayscale map of the per-pixel inversion error.
    DiffHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grayscale map of the attention each token receives in a backbone stage.
    AttentionMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print MSE, PSNR and SSIM between two images as JSON.
    Metrics {
        #[arg(long = "in", num_args = 1, required = true)]
        input: Vec<PathBuf>,
    },
}

#[derive(Clone)]
struct Layers(Vec<usize>);

fn parse_layers(s: &str) -> Result<Layers, String> {
    wplus_cli::parse_layers(s).map(Layers)
}

fn two(paths: &[PathBuf]) -> anyhow::Result<(&PathBuf, &PathBuf)> {
    match paths {
        [a, b] => Ok((a, b)),
        _ => anyhow::bail!("expected exactly two --in images, got {}", paths.len()),
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    use wplus_cli as w;
    match cmd {
        Command::Train { config, out, seed, steps, resume } => w::train(w::TrainArgs {
            config: config.as_deref(),
            out: &out,
            seed,
            steps,
            resume: resume.as_deref(),
        }),
        Command::Invert { checkpoint, input, out, codes_out } => {
            w::invert(&checkpoint, &input, &out, codes_out.as_deref())
        }
        Command::Synthesize { checkpoint, input, out } => w::synthesize(&checkpoint, &input, &out),
        Command::Edit { checkpoint, input, direction, alpha, out, codes_out } => {
            w::edit(&checkpoint, &input, &direction, alpha, &out, codes_out.as_deref())
        }
        Command::Mix { checkpoint, input, layers, out } => {
            let (a, b) = two(&input)?;
            w::mix(&checkpoint, a, b, &layers.0, &out)
        }
        Command::SuperResolve { checkpoint, input, factor, out } => {
            w::super_resolve(&checkpoint, &input, factor, &out)
        }
        Command::DiffHeatmap { checkpoint, input, out } => w::heatmap(&checkpoint, &input, &out),
        Command::AttentionMap { checkpoint, input, stage, out } => {
            w::attention_map(&checkpoint, &input, stage, &out)
        }
        Command::Metrics { input } => {
            let (a, b) = two(&input)?;
            println!("{}", w::compare(a, b)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

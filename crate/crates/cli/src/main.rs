use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gacan::data::SplitKind;
use gacan_cli::commands::{self, GradcheckArgs, Scope, SynthArgs};
use gacan_cli::config::{parse_modes, Preset, RunConfig};
use gacan_cli::CliError;

#[derive(Parser)]
#[command(name = "gacan", version, about = "Multi-granularity graph attention traffic forecaster")]
struct Cli {
    /// Run configuration (`key = value` lines). Without it the toy preset
    /// reads speeds.csv and distances.csv from the working directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set (speeds.csv, distances.csv, truth.json).
    Synth {
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 21)]
        days: usize,
        /// Minutes per slice.
        #[arg(long, default_value_t = 5)]
        p: usize,
        /// Noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Fill gaps and write the cleaned series and thresholded adjacency.
    Preprocess,
    /// Train a model and write checkpoint.txt, history.csv and config.txt.
    Train,
    /// Score a checkpoint against the historical average.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Forecast the slices after t0.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t0: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// primitives, block, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Random inputs per primitive.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Corrupt a backward rule; the check is expected to fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
        /// Also write gradcheck.txt into --out.
        #[arg(long)]
        write: bool,
    },
    /// Train one model per granularity mode and compare them.
    Ablate {
        /// Subset of a,b,c,d.
        #[arg(long)]
        modes: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<SplitKind, CliError> {
    match s {
        "train" => Ok(SplitKind::Train),
        "val" => Ok(SplitKind::Val),
        "test" => Ok(SplitKind::Test),
        _ => Err(CliError::Config(format!("unknown split '{s}' (train, val, test)"))),
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let config = |preset: Preset| -> Result<RunConfig, CliError> {
        let mut cfg = commands::load_config(cli.config.as_ref(), preset)?;
        if let Some(seed) = cli.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    };
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth { nodes, days, p, noise } => commands::cmd_synth(
            &SynthArgs {
                nodes: *nodes,
                days: *days,
                p_minutes: *p,
                noise: *noise,
                seed: cli.seed,
            },
            out,
        ),
        Command::Preprocess => commands::cmd_preprocess(&config(Preset::Toy)?, out),
        Command::Train => commands::cmd_train(&config(Preset::Toy)?, out),
        Command::Eval { checkpoint, split } => {
            commands::cmd_eval(&config(Preset::Toy)?, checkpoint, parse_split(split)?, out)
        }
        Command::Predict { checkpoint, t0 } => commands::cmd_predict(&config(Preset::Toy)?, checkpoint, *t0, out),
        Command::Gradcheck {
            scope,
            trials,
            inject_fault,
            write,
        } => {
            let cfg = commands::load_config(cli.config.as_ref(), Preset::Gradcheck)?;
            let args = GradcheckArgs {
                scope: scope.parse::<Scope>()?,
                trials: *trials,
                seed: cli.seed,
                inject_fault: *inject_fault,
            };
            commands::cmd_gradcheck(&cfg, &args, write.then_some(out))
        }
        Command::Ablate { modes } => {
            let modes = modes.as_deref().map(parse_modes).transpose()?;
            commands::cmd_ablate(&config(Preset::Toy)?, modes.as_deref(), out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            if !summary.is_empty() {
                // A closed pipe (e.g. `| head`) is not an error worth reporting.
                let _ = writeln!(std::io::stdout(), "{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

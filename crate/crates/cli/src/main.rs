use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfm::data::Preset;
use dfm::flow::OdeMethod;
use dfm::metrics::EvalOptions;
use dfm_cli::commands::{self, EvalArgs, GenArgs, TranslateArgs};
use dfm_cli::config::{parse_override, RunConfig, OUTPUT_ROOT_ENV};
use dfm_cli::reproduce::{reproduce, Experiment, ReproduceArgs};
use dfm_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "dfm", version, about = "Conditional flow matching with learned interpolants")]
#[command(after_help = format!("Relative output paths are placed under ${OUTPUT_ROOT_ENV} when it is set."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset or spec-file dataset with its manifest.
    Gen {
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<Preset>,
        /// JSON blob specification.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. `--set mode=fm-cond`. Repeatable;
        /// wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
        set: Vec<(String, String)>,
    },
    /// Push points through a trained velocity checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with `dim_0..` columns.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "translated.csv")]
        out: PathBuf,
        #[command(flatten)]
        ode: OdeArgs,
        /// Also write every state on the time grid to this CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Score a velocity checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        preset: Option<Preset>,
        /// Preset seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Paired split CSV for translation error.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        surface: Option<PathBuf>,
        /// Fail when no paired split is available.
        #[arg(long)]
        require_te: bool,
        #[command(flatten)]
        ode: OdeArgs,
        /// Samples per condition.
        #[arg(long, default_value_t = 500)]
        size: usize,
        /// Seed for evaluation subsampling.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Run an experiment over several seeds.
    Reproduce {
        experiment: Experiment,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
        set: Vec<(String, String)>,
        /// Trajectories per condition in the figure data.
        #[arg(long, default_value_t = 24)]
        trajectories: usize,
    },
}

#[derive(Args)]
struct OdeArgs {
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value = "euler")]
    method: OdeMethod,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { preset, spec, seed, out } => {
            let dir = commands::gen(&GenArgs { preset, spec, seed, out })?;
            println!("{}", dir.display());
        }
        Command::Train { config, set } => {
            let input = match &config {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
                None => None,
            };
            let cfg = RunConfig::load(config.as_deref(), &set)?;
            let (dir, trained) = commands::train(&cfg, input.as_deref())?;
            if let Some(last) = trained.log.fm_losses().last() {
                eprintln!("final flow-matching loss {last:.6}");
            }
            println!("{}", dir.display());
        }
        Command::Translate {
            checkpoint,
            input,
            out,
            ode,
            trajectory,
        } => {
            let path = commands::translate(&TranslateArgs {
                checkpoint,
                input,
                out,
                steps: ode.steps,
                method: ode.method,
                trajectory,
            })?;
            println!("{}", path.display());
        }
        Command::Eval {
            checkpoint,
            preset,
            seed,
            data,
            eval_data,
            surface,
            require_te,
            ode,
            size,
            eval_seed,
            out,
        } => {
            let (path, report) = commands::eval(&EvalArgs {
                checkpoint,
                preset,
                seed,
                data,
                eval_data,
                surface,
                require_te,
                options: EvalOptions {
                    steps: ode.steps,
                    method: ode.method,
                    size,
                    seed: eval_seed,
                },
                out,
            })?;
            eprintln!("{}\n{}", dfm::metrics::EvalReport::CSV_HEADER, report.csv_row());
            println!("{}", path.display());
        }
        Command::Reproduce {
            experiment,
            seeds,
            out,
            set,
            trajectories,
        } => {
            let args = ReproduceArgs {
                seeds,
                overrides: set,
                trajectories,
                ..ReproduceArgs::new(experiment, out.unwrap_or_else(|| PathBuf::from(experiment.as_str())))
            };
            let summary = reproduce(&args)?;
            print!("{}", summary.pretty(experiment.metrics()));
            println!("{}", summary.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

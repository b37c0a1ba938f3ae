use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use segnl_core::pipeline::{self, RunConfig};
use segnl_core::Error;

#[derive(Parser)]
#[command(name = "segnl", version, about = "Ventricle segmentation from noisy watershed pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom cohort and its manifest.
    Generate(Common),
    /// Preprocess every subject and produce watershed pseudo-labels.
    Pseudolabel(Common),
    /// Train the U-net on the pseudo-labels.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the last completed epoch of an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Score the trained network and the watershed on the test split.
    Evaluate(Common),
    /// Run all stages in order.
    Experiment(Common),
    /// Print the default configuration as JSON.
    PrintDefaultConfig,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Recompute stages even if their outputs are current.
    #[arg(long)]
    force: bool,
}

const EXIT_COMPARISON: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn setup(common: &Common) -> Result<RunConfig, u8> {
    if let Some(n) = common.threads {
        if n == 0 {
            error!("--threads must be at least 1");
            return Err(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("cannot configure thread pool: {e}");
            return Err(EXIT_RUNTIME);
        }
    }
    RunConfig::load(&common.config).map_err(|e| {
        error!("{e}");
        exit_code(&e)
    })
}

fn report_outcome(report: &segnl_core::metrics::EvalReport) -> u8 {
    print!("{}", report.format_table());
    println!(
        "p-value (network no better than watershed): left {:.4}  right {:.4}  both {:.4}",
        report.p_value.left, report.p_value.right, report.p_value.both
    );
    if pipeline::network_beats_watershed(report) {
        0
    } else {
        error!("network DSC does not exceed the watershed's");
        EXIT_COMPARISON
    }
}

fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::PrintDefaultConfig => {
            match serde_json::to_string_pretty(&RunConfig::default()) {
                Ok(s) => println!("{s}"),
                Err(e) => {
                    error!("{e}");
                    return EXIT_RUNTIME;
                }
            }
            return 0;
        }
        Command::Generate(ref c) | Command::Pseudolabel(ref c) | Command::Evaluate(ref c) | Command::Experiment(ref c) => {
            let cfg = match setup(c) {
                Ok(cfg) => cfg,
                Err(code) => return code,
            };
            match cli.command {
                Command::Generate(_) => pipeline::generate(&cfg, c.force).map(|_| None),
                Command::Pseudolabel(_) => pipeline::pseudolabel(&cfg, c.force).map(|_| None),
                Command::Evaluate(_) => pipeline::evaluate(&cfg, c.force).map(Some),
                _ => pipeline::experiment(&cfg, c.force).map(Some),
            }
        }
        Command::Train { ref common, resume } => {
            let cfg = match setup(common) {
                Ok(cfg) => cfg,
                Err(code) => return code,
            };
            pipeline::train(&cfg, common.force, resume).map(|_| None)
        }
    };
    match result {
        Ok(Some(report)) => report_outcome(&report),
        Ok(None) => {
            info!("done");
            0
        }
        Err(e) => {
            error!("{e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(cli))
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dekws_cli::{cmd_eval, cmd_gradcheck, cmd_run, cmd_synth, format_gradcheck, CliError};

#[derive(Parser)]
#[command(name = "dekws", version, about = "Dark-experience replay for class-incremental keyword spotting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a schedule (or baseline) from an experiment file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every op and the full network against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Write a synthetic dataset in folder-per-class WAV layout.
    Synth {
        /// Synthetic dataset spec (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-evaluate a checkpoint over the schedule of an experiment file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let report = cmd_run(&config, seed, out.as_deref())?;
            let m = &report.metrics;
            println!("ACC {:.4}  BWT {}  params {}", m.acc, fmt_opt(m.bwt), m.parameter_count);
            println!("artifacts in {}", report.config.output_dir.display());
        }
        Command::Gradcheck { seed, inject_fault } => match cmd_gradcheck(seed, inject_fault.as_deref()) {
            Ok(reports) => print!("{}", format_gradcheck(&reports)),
            Err(e @ CliError::GradCheck(_)) => {
                if let Ok(reports) = dekws_core::verify::gradcheck_suite(
                    seed,
                    inject_fault.as_deref().and_then(dekws_core::autodiff::OpKind::from_name),
                ) {
                    print!("{}", format_gradcheck(&reports));
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        },
        Command::Synth { config, out, seed } => {
            let n = cmd_synth(&config, &out, seed)?;
            println!("wrote {n} WAV files and manifest.csv to {}", out.display());
        }
        Command::Eval { config, checkpoint, seed, out } => {
            let r = cmd_eval(&config, &checkpoint, seed, out.as_deref())?;
            for (t, acc) in r.per_task.iter().enumerate() {
                println!("task {:>2}  {:.4}", t + 1, acc);
            }
            println!("ACC {:.4}  class-weighted {:.4}", r.acc, r.class_weighted_acc);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dekws: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

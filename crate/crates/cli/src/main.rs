use std::path::PathBuf;
use std::process::ExitCode;

use atamlab::commands;
use atamlab::CliError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atamlab", version, about = "Angular-margin loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.json and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json and roc.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every config in a directory and tabulate the results.
    Compare {
        /// Directory of *.json configs.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay ROC curves from report.json files into roc.svg.
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { config, out } => {
            for path in commands::cmd_synth(&config, out.as_deref())? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train { config, out } => {
            let r = commands::cmd_train(&config, out.as_deref())?;
            println!("final loss {:.6}", r.final_loss);
            println!("wrote {}", r.checkpoint.display());
            println!("wrote {}", r.history.display());
        }
        Command::Eval { config, checkpoint, out } => {
            let r = commands::cmd_eval(&config, &checkpoint, out.as_deref())?;
            let rep = &r.report;
            println!("verification accuracy {:.4}  AUC {:.4}", rep.verification.best_accuracy, rep.verification.auc);
            for t in &rep.verification.tar_at_far {
                println!("TAR@FAR={} {:.4}", t.far_level, t.tar);
            }
            println!("rank-1 {:.4}  mAP {:.4}", rep.cmc.cmc.first().copied().unwrap_or(0.0), rep.map.map);
            if let Some(rho) = rep.spearman {
                println!("spearman {rho:.4}");
            }
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Compare { config, out } => {
            let table = commands::cmd_compare(&config, out.as_deref())?;
            print!("{}", commands::compare_text(&table));
        }
        Command::Gradcheck { out } => {
            let (results, err) = match commands::cmd_gradcheck(out.as_deref()) {
                Ok(r) => (r, None),
                Err((r, e)) => (r, Some(e)),
            };
            for r in &results {
                println!(
                    "{:<28} max rel error {:.3e}  {}",
                    r.name,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            if let Some(e) = err {
                return Err(e);
            }
        }
        Command::Plot { reports, out } => {
            let path = commands::cmd_plot(&reports, out.as_deref())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

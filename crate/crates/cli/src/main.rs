use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flab::{build_config, configure_threads, run_check, run_theory, run_train, CliError};

#[derive(Parser)]
#[command(name = "flab", version, about = "Forward-only learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// key = value file applied after the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// mnist-1h, cifar10-1h, table1-pepita-wm, fig3, fig3-refine
    #[arg(long)]
    preset: Option<String>,
    /// key=value override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self, extra: &[String]) -> Result<flab::RunConfig, CliError> {
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        sets.extend_from_slice(extra);
        build_config(self.preset.as_deref(), self.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write the per-epoch CSV
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV destination (stdout if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the order-parameter ODEs and/or simulate the finite-D system
    Theory {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a property suite: taylor, ff-equivalence, i2, mirror, early-expansion
    Check {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the fully resolved configuration
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Train { cfg, out } => {
            let extra: Vec<String> = out.iter().map(|p| format!("out={}", p.display())).collect();
            let cfg = cfg.build(&extra)?;
            let outcome = run_train(&cfg, |line| eprintln!("{line}"))?;
            let csv = outcome.record.to_csv();
            match &cfg.out {
                Some(path) => {
                    outcome.record.write_csv(path)?;
                    if let Some(last) = outcome.record.rows.last() {
                        println!("final test accuracy: {:.2}%", last.test_accuracy);
                    }
                }
                None => {
                    print!("{csv}");
                    if let Some(last) = outcome.record.rows.last() {
                        eprintln!("final test accuracy: {:.2}%", last.test_accuracy);
                    }
                }
            }
            Ok(true)
        }
        Command::Theory { cfg, out_dir } => {
            let extra: Vec<String> = out_dir
                .iter()
                .map(|p| format!("out_dir={}", p.display()))
                .collect();
            let cfg = cfg.build(&extra)?;
            let outcome = run_theory(&cfg)?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            for c in &outcome.checks {
                println!("{c}");
            }
            Ok(true)
        }
        Command::Check { suite, seed } => run_check(&suite, seed, std::io::stdout().lock()),
        Command::Config { cfg } => {
            let cfg = cfg.build(&[])?;
            std::io::stdout().write_all(cfg.serialize().as_bytes()).ok();
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ngem::harness::{self, LossKind, RunConfig};
use ngem::{checkpoint, oracle, Error};

#[derive(Parser)]
#[command(
    name = "ngem",
    version,
    about = "Mixture density networks trained with natural-gradient EM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, model.mdn and run.conf.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's loss (nll, sgem or ngem).
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Time nGEM against NLL on a configuration.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        updates: usize,
    },
    /// Run the numerical checks and print a pass/fail table.
    Verify {
        /// Monte-Carlo samples for the Fisher estimates.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the dataset a configuration refers to as CSV.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train {
            config,
            seed,
            loss,
            out,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = loss {
                cfg.loss = l;
            }
            let ds = harness::load_dataset(&cfg)?;
            let outcome = harness::Trainer::with_dataset(&cfg, &ds)?.run()?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            fs::write(out.join("run.conf"), cfg.to_text())
                .map_err(|e| Error::io(out.join("run.conf"), e))?;
            harness::emit_csv(
                &outcome.metrics,
                outcome.means_shape,
                &out.join("metrics.csv"),
            )?;
            checkpoint::save(
                &outcome.model.to_net(ds.input_dim())?,
                &out.join("model.mdn"),
            )?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "iteration {}  train_loss {:.6}  test_nll {:.6}  entropy {:.4}  rmse_min {:.4}",
                    last.iteration, last.train_loss, last.test_nll, last.entropy, last.rmse_min
                );
            }
            println!("wrote {}", out.display());
            if let Some(d) = outcome.divergence {
                eprintln!("stopped early: {d}");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { config, updates } => {
            let cfg = RunConfig::from_file(&config)?;
            let r = harness::benchmark_overhead(&cfg, updates)?;
            println!("updates  {}", r.updates);
            println!("ngem     {:.3} s", r.ngem_secs);
            println!("nll      {:.3} s", r.nll_secs);
            println!("ratio    {:.4}", r.ratio());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { samples, seed } => {
            let checks = oracle::checks::all(samples, seed);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            println!("{} checks, {} failed", checks.len(), failed);
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Dataset { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            harness::load_dataset(&cfg)?.write_csv(&out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

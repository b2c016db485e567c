use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unetrpp_cli::{format_ledger, format_suite_row, parse_list, CliError};
use unetrpp_core::bench::{BenchConfig, TrackingAlloc};

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

#[derive(Parser)]
#[command(name = "unetrpp", about = "Volumetric segmentation with efficient paired attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic volumes.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a volume and score it against ground truth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op, layer, block and
    /// a minimal model.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Analytic parameter and FLOP ledger.
    Count {
        #[arg(long)]
        config: PathBuf,
        /// Ledger CSV; defaults to the config path with a `.ledger.csv` extension.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Attention scaling benchmark.
    Bench {
        #[arg(long, default_value = "512,1024,2048,4096,8192,16384")]
        n: String,
        #[arg(long, default_value_t = 64)]
        p: usize,
        #[arg(long, default_value_t = 32)]
        c: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, out } => {
            let s = unetrpp_cli::train(&config, &out, |epoch, loss, dsc| {
                println!("epoch {epoch:>4}  loss {loss:.5}  mean_dsc {dsc:.4}");
            })?;
            println!(
                "trained {} epochs; final loss {:.5}; training-set mean DSC {:.4}; checkpoint {}",
                s.epochs_run,
                s.final_loss,
                s.train_dsc,
                s.checkpoint.display()
            );
        }
        Command::Eval { ckpt, image, truth, out } => {
            let r = unetrpp_cli::eval(&ckpt, &image, &truth, &out)?;
            for (i, c) in r.classes.iter().enumerate() {
                println!("class {c}: dsc {:.4} hd95 {:.3}", r.per_class_dsc[i], r.per_class_hd95[i]);
            }
            println!("mean: dsc {:.4} hd95 {:.3}", r.mean_dsc, r.mean_hd95);
        }
        Command::Gradcheck { seeds } => {
            let rows = unetrpp_cli::gradcheck(seeds, |r| println!("{}", format_suite_row(r)))?;
            println!("all {} checks passed", rows.len());
        }
        Command::Count { config, csv } => {
            let csv = csv.unwrap_or_else(|| config.with_extension("ledger.csv"));
            let ledger = unetrpp_cli::count(&config, &csv)?;
            print!("{}", format_ledger(&ledger));
            println!("ledger written to {}", csv.display());
        }
        Command::Bench { n, p, c, heads, trials, seed, out } => {
            let cfg = BenchConfig { ns: parse_list(&n)?, p, c, heads, trials, seed };
            let s = unetrpp_cli::bench(&cfg, &out, |r| {
                println!(
                    "{:<12} n {:>6}  flops {:>12}  median {:>12} ns  peak {:>10} B",
                    r.mechanism.name(),
                    r.n,
                    r.analytic_flops,
                    r.wall_ns,
                    r.peak_bytes
                );
            })?;
            for (m, slope) in &s.slopes {
                println!("{:<12} slope {slope:.3}", m.name());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

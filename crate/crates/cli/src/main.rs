//! taulab: run, sweep, verify, export and compare self-training experiments.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 verification
//! failure, 3 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taulab_core::gradcheck::{run_grid, GridSpec};
use taulab_core::harness;
use taulab_core::Error;

#[derive(Parser)]
#[command(name = "taulab", version, about = "Temperature-decoupled self-training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file.
    Run {
        /// Path to the TOML experiment config.
        config: PathBuf,
    },
    /// Evaluate a checkpoint's pass@k over evaluation temperatures.
    Sweep {
        /// Policy checkpoint (task.json is read from the same directory
        /// unless --task is given).
        checkpoint: PathBuf,
        /// Comma-separated evaluation temperatures.
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<f64>,
        /// Samples per prompt.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Comma-separated k values for pass@k.
        #[arg(long, value_delimiter = ',', default_value = "1,8")]
        k: Vec<usize>,
        /// Task spec JSON (defaults to task.json next to the checkpoint).
        #[arg(long)]
        task: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the gradient-dynamics verification grid.
    Gradcheck(GradcheckArgs),
    /// Export a run's metrics as a tidy CSV with EMA smoothing.
    Export {
        run_dir: PathBuf,
        /// Output file (defaults to <run_dir>/plots.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the final metrics and per-step wall time of two runs.
    Compare { run_a: PathBuf, run_b: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GridPreset {
    /// 2 vocabulary sizes, 5 vectors each.
    Quick,
    /// 4 vocabulary sizes, 20 vectors each.
    Default,
    /// 4 vocabulary sizes, 100 vectors each.
    Large,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Grid preset; the flags below override its fields.
    #[arg(long, value_enum, default_value = "default")]
    grid: GridPreset,
    /// Comma-separated vocabulary sizes for the probe rows.
    #[arg(long, value_delimiter = ',')]
    vocab_sizes: Option<Vec<usize>>,
    /// Random logit vectors per vocabulary size.
    #[arg(long)]
    vectors: Option<usize>,
    /// Comma-separated temperatures; the grid uses all ordered pairs.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the closed form to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version "errors" are successful exits
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Internal(_) => 1,
        Error::Verification(_) => 2,
        Error::Io(_) | Error::Json(_) => 3,
    }
}

fn dispatch(cli: Cli) -> taulab_core::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { config } => {
            let summary = harness::run_experiment(&config)?;
            println!("run complete: {}", summary.run_dir.display());
            let final_step = summary.final_step();
            for rec in summary
                .records
                .iter()
                .filter(|r| r.step == final_step && r.name == "pass_at_k" && r.tags.get("k").map(String::as_str) == Some("1"))
            {
                let tau = rec.tags.get("tau").map(String::as_str).unwrap_or("?");
                println!("final pass@1 (tau={tau}) = {:.4}", rec.value);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { checkpoint, taus, n, k, task, out, seed } => {
            let report = harness::temperature_sweep(&checkpoint, task.as_deref(), &taus, n, &k, seed)?;
            let csv = report.to_csv();
            match out {
                Some(path) => std::fs::write(&path, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck(args) => {
            let mut spec = GridSpec { seed: args.seed, ..GridSpec::default() };
            match args.grid {
                GridPreset::Quick => {
                    spec.vocab_sizes = vec![3, 5];
                    spec.vectors_per_size = 5;
                }
                GridPreset::Default => {}
                GridPreset::Large => {
                    spec.vectors_per_size = 100;
                }
            }
            if let Some(sizes) = args.vocab_sizes {
                spec.vocab_sizes = sizes;
            }
            if let Some(vectors) = args.vectors {
                spec.vectors_per_size = vectors;
            }
            if let Some(taus) = args.taus {
                spec.tau_pairs = taus.iter().flat_map(|&a| taus.iter().map(move |&b| (a, b))).collect();
                spec.taus = taus;
            }
            let report = run_grid(&spec, args.inject_fault)?;
            print!("{}", report.render());
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Verification("gradient checks failed".into()))
            }
        }
        Cmd::Export { run_dir, out } => {
            let path = harness::export_plots(&run_dir, out.as_deref())?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare { run_a, run_b } => {
            let report = harness::compare_runs(&run_a, &run_b)?;
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }
    }
}

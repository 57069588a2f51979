use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pamt::harness::{run_controls, sensitivity_sweep, sweep_table, Experiment, ExperimentConfig, Protocol, RunDir};
use pamt::metrics::{plot_report, ResultsMatrix, RunReport};

#[derive(Parser)]
#[command(name = "pamt", about = "Continual generative retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the desk-scale configuration as TOML.
    DefaultConfig {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Generate corpus, split and identifiers into a new run directory.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Session 0: co-train backbone and memory head on the initial slice.
    TrainBase {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run one later session. Without stage flags both stages run.
    RunSession {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        stage1: bool,
        #[arg(long)]
        stage2: bool,
    },
    /// Run every remaining session.
    RunAll {
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate all complete sessions and write results and report files.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "expanded")]
        protocol: Protocol,
    },
    /// Frozen-trie, zero-shot and collision controls on the session-0 state.
    Controls {
        #[arg(long)]
        run: PathBuf,
    },
    /// Full runs over a grid of protected fractions and budgets.
    Sweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1])]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Print a stored report in percentage points.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "expanded")]
        protocol: Protocol,
        /// Also write `curves.svg` next to the report.
        #[arg(long)]
        plot: bool,
    },
}

fn open(run: &Path) -> Result<(RunDir, Experiment)> {
    RunDir::open(run).with_context(|| format!("opening run directory {}", run.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::DefaultConfig { seed } => print!("{}", ExperimentConfig::desk(seed).to_toml()),
        Command::GenCorpus { config, run } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let exp = Experiment::build(cfg)?;
            RunDir::create(&run, &exp)?;
            let sizes: Vec<usize> = exp.split().slices.iter().map(Vec::len).collect();
            println!(
                "slices {sizes:?}, collision rate {:.4}, discarded test queries {}",
                exp.collision_rate()?,
                exp.split().discarded.len()
            );
        }
        Command::TrainBase { run } => {
            let (dir, exp) = open(&run)?;
            dir.run_session(&exp, 0, true, true)?;
        }
        Command::RunSession { run, t, stage1, stage2 } => {
            let (dir, exp) = open(&run)?;
            let both = !stage1 && !stage2;
            dir.run_session(&exp, t, stage1 || both, stage2 || both)?;
        }
        Command::RunAll { run } => {
            let (dir, exp) = open(&run)?;
            for t in 0..=exp.last_session() {
                dir.run_session(&exp, t, true, true)?;
            }
        }
        Command::Eval { run, protocol } => {
            let (dir, exp) = open(&run)?;
            let (_, report) = dir.evaluate(&exp, protocol)?;
            print_report(&report);
        }
        Command::Controls { run } => {
            let (dir, exp) = open(&run)?;
            let base = dir.load_session(0)?;
            let c = run_controls(&exp, &base)?;
            std::fs::write(run.join("controls.json"), serde_json::to_string_pretty(&c)?)?;
            println!(
                "frozen drop {:.2}  zero-shot avg {:.2}  collision rate {:.4}",
                100.0 * c.final_frozen_drop(),
                100.0 * c.zero_shot_avg,
                c.collision_rate
            );
        }
        Command::Sweep { run, p, m } => {
            let (dir, exp) = open(&run)?;
            if m.is_empty() {
                bail!("--m needs at least one budget");
            }
            let base = dir.load_session(0)?;
            let rows = sensitivity_sweep(&exp, &base, &p, &m)?;
            let table = sweep_table(&rows);
            std::fs::write(run.join("sweep.tsv"), &table)?;
            print!("{table}");
        }
        Command::Report { run, protocol, plot } => {
            let out = run.join(format!("eval_{}", protocol.as_str()));
            let report = RunReport::from_json(&std::fs::read_to_string(out.join("report.json"))?)?;
            let matrix = ResultsMatrix::from_csv(&std::fs::read_to_string(out.join("results.csv"))?)?;
            let again = RunReport::from_matrix(&matrix, report.seed, report.elapsed_secs, report.config.clone())?;
            if (again.bwt - report.bwt).abs() > 1e-12 || (again.ap - report.ap).abs() > 1e-12 {
                bail!("report.json does not match results.csv");
            }
            print_report(&report);
            if plot {
                plot_report(&report, &out.join("curves.svg"))?;
                println!("wrote {}", out.join("curves.svg").display());
            }
        }
    }
    Ok(())
}

fn print_report(r: &RunReport) {
    let pct = |v: &[f64]| v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join(" ");
    println!("AP {:.2}  BWT {:+.2}  FWT_diag {:.2}", 100.0 * r.ap, 100.0 * r.bwt, 100.0 * r.fwt_diag);
    println!("diagonal  {}", pct(&r.diagonal));
    println!("final row {}", pct(&r.final_row));
}

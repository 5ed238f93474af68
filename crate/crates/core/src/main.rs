use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relcon::experiment::{
    compare_table, delta_csv, emit_reports, parse_config, parse_results_csv, run_experiment,
    summarize, ExperimentConfig,
};
use relcon::fmt::sig9;
use relcon::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "relcon", version, about = "Relation-consistency semi-supervised training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant once per seed.
    Run(RunArgs),
    /// Train every cell of the configured sweep grid.
    Sweep(RunArgs),
    /// Summarize an output directory and compare variants against a baseline.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "baseline")]
        baseline: String,
    },
    /// Run the gradient and invariant suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Train with this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Comma-separated epoch indices after which relation matrices are dumped.
    #[arg(long, value_delimiter = ',')]
    dump_relations: Option<Vec<usize>>,
}

fn load(args: &RunArgs, sweep: bool) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(&args.config)?;
    if !sweep {
        cfg = cfg.single_cell();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.sweep.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(epochs) = &args.dump_relations {
        cfg.dump_relations = epochs.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &RunArgs, sweep: bool) -> Result<bool> {
    let cfg = load(args, sweep)?;
    let report = run_experiment(&cfg, args.parallel.max(1))?;
    emit_reports(&report, &cfg.out)?;
    for c in &report.cells {
        let cell = &c.cell;
        match &c.outcome {
            Ok(run) => println!(
                "{} beta={} fraction={} seed={}: auc {} acc {}",
                cell.variant,
                sig9(cell.beta),
                sig9(cell.fraction),
                cell.seed,
                sig9(run.metrics.auc),
                sig9(run.metrics.accuracy)
            ),
            Err(e) => eprintln!(
                "{} beta={} fraction={} seed={}: FAILED: {e}",
                cell.variant,
                sig9(cell.beta),
                sig9(cell.fraction),
                cell.seed
            ),
        }
    }
    println!("wrote {} ({} cells, {} failed)", cfg.out.display(), report.cells.len(), report.failures());
    Ok(report.failures() == 0)
}

fn report(dir: &Path, baseline: &str) -> Result<bool> {
    let path = dir.join("results.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows = parse_results_csv(&text)?;
    println!("{:<14} {:>6} {:>8} {:>4}  {:>9} {:>9} {:>9} {:>9} {:>9}", "variant", "beta", "fraction", "n", "auc", "sens", "spec", "acc", "f1");
    for s in summarize(&rows) {
        let m: Vec<String> = (0..5).map(|k| format!("{:.4}", s.mean[k])).collect();
        println!(
            "{:<14} {:>6} {:>8} {:>4}  {:>9} {:>9} {:>9} {:>9} {:>9}",
            s.variant,
            sig9(s.beta),
            sig9(s.fraction),
            s.runs,
            m[0],
            m[1],
            m[2],
            m[3],
            m[4]
        );
    }
    if rows.iter().any(|r| r.variant == baseline) {
        let deltas = compare_table(&rows, baseline)?;
        let out = dir.join("compare.csv");
        std::fs::write(&out, delta_csv(&deltas)).map_err(|e| Error::io(&out, e))?;
        println!("\ndeltas vs {baseline} (sorted by auc):");
        for d in &deltas {
            println!(
                "{:<14} {:>6} {:>8}  d_auc {:+.4}  d_acc {:+.4}",
                d.variant,
                sig9(d.beta),
                sig9(d.fraction),
                d.delta[0],
                d.delta[3]
            );
        }
    }
    Ok(rows.iter().all(|r| r.metrics.is_some()))
}

fn run_selftest(seed: u64) -> bool {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => train(args, false),
        Command::Sweep(args) => train(args, true),
        Command::Report { dir, baseline } => report(dir, baseline),
        Command::Selftest { seed } => Ok(run_selftest(*seed)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

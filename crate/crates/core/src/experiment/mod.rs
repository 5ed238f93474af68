//! Config-driven experiment grids: every sweep cell trains one variant and is
//! scored on the held-out test split.

mod config;
mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{split_labeled, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::ArchSpec;
use crate::trainer::{run_variant, CurvePoint, RelationDump, RunOptions};

pub use config::{
    parse_config, parse_config_str, BackboneChoice, Cell, DatasetConfig, ExperimentConfig,
    Generator, ModelConfig, SweepConfig, MAX_CELLS,
};
pub use report::{
    compare_table, curves_csv, delta_csv, emit_reports, parse_curves_csv, parse_results_csv,
    result_rows, results_csv, run_dir_name, summarize, summary_csv, DeltaRow, ResultRow,
    SummaryRow, CURVES_HEADER, RESULTS_HEADER,
};

/// Successful training of one cell.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub metrics: MetricsReport,
    pub test_top1: Option<f64>,
    pub curves: Vec<CurvePoint>,
    pub dumps: Vec<RelationDump>,
    pub unlabeled_reads: usize,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<CellRun, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_echo: String,
    pub config_hash: String,
    pub wall_time_s: f64,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

/// SHA-256 over git's blob framing of the text.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn run_cell(cfg: &ExperimentConfig, arch: &ArchSpec, cell: &Cell, split: &Split) -> Result<CellRun> {
    let opts = RunOptions {
        dump_epochs: cfg.dump_relations.clone(),
        ..RunOptions::default()
    };
    // each cell gets its own copy so read counters stay per cell
    let split = split.clone();
    let out = run_variant(&cfg.cell_train(cell), arch, &cfg.perturb, &split, &opts)?;
    Ok(CellRun {
        metrics: out.test,
        test_top1: out.test_top1,
        curves: out.curves,
        dumps: out.dumps,
        unlabeled_reads: out.unlabeled_reads,
    })
}

/// Runs every cell. With `parallel > 1` cells run on a pool of that many
/// threads; results keep the grid order either way.
pub fn run_experiment(cfg: &ExperimentConfig, parallel: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let ds = cfg.dataset.build()?;
    let cells = cfg.cells();

    let mut splits: BTreeMap<u64, std::result::Result<Split, String>> = BTreeMap::new();
    for cell in &cells {
        splits
            .entry(cell.fraction.to_bits())
            .or_insert_with(|| split_labeled(&ds, &cfg.cell_split(cell)).map_err(|e| e.to_string()));
    }
    let arch = cfg.model.arch(&ds)?;
    let job = |cell: &Cell| -> CellResult {
        let outcome = match &splits[&cell.fraction.to_bits()] {
            Ok(split) => run_cell(cfg, &arch, cell, split).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        CellResult {
            cell: cell.clone(),
            outcome,
        }
    };
    let results: Vec<CellResult> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(job).collect())
    } else {
        cells.iter().map(job).collect()
    };
    let echo = cfg.to_toml();
    Ok(ExperimentReport {
        config_hash: content_hash(&echo),
        config_echo: echo,
        wall_time_s: started.elapsed().as_secs_f64(),
        cells: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> ExperimentConfig {
        let text = format!(
            "[dataset]\ngenerator = \"two_moons\"\nn = 120\n\n[model]\nhidden = [8]\n\n\
             [train]\ntotal_epochs = 2\nramp_epochs = 1\nlearning_rate = 0.01\n{extra}"
        );
        parse_config_str(&text).unwrap()
    }

    #[test]
    fn beta_by_seed_grid_gives_four_rows() {
        let cfg = tiny("\n[sweep]\nbeta = [0.0, 1.0]\nseeds = [1, 2]\n");
        let rep = run_experiment(&cfg, 1).unwrap();
        assert_eq!(rep.cells.len(), 4);
        assert_eq!(rep.failures(), 0);
    }

    #[test]
    fn parallel_runs_match_sequential_runs() {
        let cfg = tiny("\n[sweep]\nvariant = [\"baseline\", \"mt\", \"src_mt\"]\nseeds = [3]\n");
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 3).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x.cell, y.cell);
            let (x, y) = (x.outcome.as_ref().unwrap(), y.outcome.as_ref().unwrap());
            assert_eq!(x.metrics, y.metrics);
            assert_eq!(x.curves, y.curves);
        }
        assert_eq!(a.cells[0].outcome.as_ref().unwrap().unlabeled_reads, 0);
    }

    #[test]
    fn failing_cells_are_recorded_and_the_rest_still_run() {
        // a tiny labeled fraction leaves a class without labels
        let cfg = tiny("\n[sweep]\nlabeled_fraction = [0.005, 0.5]\n");
        let rep = run_experiment(&cfg, 1).unwrap();
        assert_eq!(rep.failures(), 1);
        assert!(rep.cells[0].outcome.is_err());
        assert!(rep.cells[1].outcome.is_ok());
    }

    #[test]
    fn hash_uses_git_blob_framing() {
        // printf 'blob 6\0hello\n' | sha256sum
        assert_eq!(
            content_hash("hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}

//! Ablation grids: every (positional encoding, ablated layer set) cell is
//! trained for several seeds, and the results are aggregated into tables
//! laid out like the residual-ablation accuracy tables.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{format_layer_set, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::task::DatasetSplit;
use crate::trainer::{train, TrainObserver};

/// Final accuracy (percent) at or above which a run counts as converged.
pub const CONVERGED_PERCENT: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub use_positional_encoding: bool,
    pub ablated_layers: BTreeSet<usize>,
    pub n_seeds: usize,
}

impl GridCell {
    /// File-name-safe identifier, e.g. `pe_none` or `nope_1-2`.
    pub fn id(&self) -> String {
        let variant = if self.use_positional_encoding {
            "pe"
        } else {
            "nope"
        };
        let layers = if self.ablated_layers.is_empty() {
            "none".to_string()
        } else {
            self.ablated_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join("-")
        };
        format!("{variant}_{layers}")
    }

    pub fn row_label(&self) -> &'static str {
        if self.use_positional_encoding {
            "Original"
        } else {
            "NoPE"
        }
    }

    pub fn column_label(&self) -> String {
        format_layer_set(&self.ablated_layers)
    }

    pub fn config(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.use_positional_encoding = self.use_positional_encoding;
        c.model.ablated_layers = self.ablated_layers.clone();
        c.train.seed = seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub base: ExperimentConfig,
    pub cells: Vec<GridCell>,
}

impl ExperimentGrid {
    /// The cross product of variants and layer sets, each with `n_seeds`.
    pub fn cross(
        base: ExperimentConfig,
        variants: &[bool],
        layer_sets: &[BTreeSet<usize>],
        n_seeds: usize,
    ) -> Self {
        let cells = layer_sets
            .iter()
            .flat_map(|set| {
                variants.iter().map(move |&pe| GridCell {
                    use_positional_encoding: pe,
                    ablated_layers: set.clone(),
                    n_seeds,
                })
            })
            .collect();
        ExperimentGrid { base, cells }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let mut seen = BTreeSet::new();
        for cell in &self.cells {
            if cell.n_seeds == 0 {
                return Err(LabError::Config(format!("cell {} has no seeds", cell.id())));
            }
            if !seen.insert(cell.id()) {
                return Err(LabError::Config(format!(
                    "cell {} appears twice",
                    cell.id()
                )));
            }
            cell.config(&self.base, 1).validate()?;
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.cells.iter().map(|c| c.n_seeds).sum()
    }
}

/// One training run, written as a JSON completion marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: String,
    pub use_positional_encoding: bool,
    pub ablated_layers: BTreeSet<usize>,
    pub seed: u64,
    /// Exact-match accuracy on the full test split, percent.
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub converged: bool,
    pub iterations: usize,
    pub failure: Option<String>,
    pub wall_seconds: f64,
}

/// Aggregate over the seeds of one cell. Accuracies in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub cell: GridCell,
    pub runs: Vec<RunRecord>,
    pub min: f64,
    pub max: f64,
    pub avg: f64,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn from_runs(cell: GridCell, runs: Vec<RunRecord>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
        let n = accs.len().max(1) as f64;
        RunReport {
            min: accs
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
                .min(100.0),
            max: accs.iter().copied().fold(0.0, f64::max),
            avg: accs.iter().sum::<f64>() / n,
            wall_seconds: runs.iter().map(|r| r.wall_seconds).sum(),
            cell,
            runs,
        }
    }

    pub fn converged(&self) -> Vec<bool> {
        self.runs.iter().map(|r| r.converged).collect()
    }
}

pub fn marker_path(out: &Path, cell: &GridCell, seed: u64) -> PathBuf {
    out.join("runs")
        .join(format!("{}_seed{seed}.json", cell.id()))
}

/// Where the trained model of one grid run is saved.
pub fn checkpoint_path(out: &Path, cell: &GridCell, seed: u64) -> PathBuf {
    marker_path(out, cell, seed).with_extension("ckpt")
}

/// Called around each run so callers can report progress.
pub trait GridObserver {
    fn run_started(&mut self, _cell: &GridCell, _seed: u64) -> Box<dyn TrainObserver> {
        Box::new(())
    }
    fn run_finished(&mut self, _record: &RunRecord, _resumed: bool) {}
}

impl GridObserver for () {}

/// Trains every cell for seeds `1..=n_seeds` (model and batch seed alike).
/// With `resume`, runs whose marker exists are loaded instead of retrained.
/// A run that errors is recorded with accuracy 0 and the grid continues.
pub fn run_grid(
    grid: &ExperimentGrid,
    split: &DatasetSplit,
    out: &Path,
    resume: bool,
    observer: &mut dyn GridObserver,
) -> Result<Vec<RunReport>> {
    grid.validate()?;
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir).map_err(|e| LabError::io(&runs_dir, e))?;
    let mut reports = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let mut runs = Vec::with_capacity(cell.n_seeds);
        for seed in 1..=cell.n_seeds as u64 {
            let marker = marker_path(out, cell, seed);
            if resume && marker.exists() {
                let record = read_record(&marker)?;
                observer.run_finished(&record, true);
                runs.push(record);
                continue;
            }
            let config = cell.config(&grid.base, seed);
            let mut train_observer = observer.run_started(cell, seed);
            let record = match train(&config, seed, split, train_observer.as_mut()) {
                Ok((trainer, report)) => {
                    save_checkpoint(&checkpoint_path(out, cell, seed), &trainer)?;
                    RunRecord {
                        cell: cell.id(),
                        use_positional_encoding: cell.use_positional_encoding,
                        ablated_layers: cell.ablated_layers.clone(),
                        seed,
                        final_accuracy: 100.0 * report.final_accuracy,
                        best_accuracy: 100.0 * report.best_accuracy,
                        converged: 100.0 * report.final_accuracy >= CONVERGED_PERCENT,
                        iterations: trainer.iter,
                        failure: report.failure,
                        wall_seconds: report.wall_seconds,
                    }
                }
                Err(e) => RunRecord {
                    cell: cell.id(),
                    use_positional_encoding: cell.use_positional_encoding,
                    ablated_layers: cell.ablated_layers.clone(),
                    seed,
                    final_accuracy: 0.0,
                    best_accuracy: 0.0,
                    converged: false,
                    iterations: 0,
                    failure: Some(e.to_string()),
                    wall_seconds: 0.0,
                },
            };
            write_record(&marker, &record)?;
            observer.run_finished(&record, false);
            runs.push(record);
        }
        reports.push(RunReport::from_runs(cell.clone(), runs));
    }
    Ok(reports)
}

fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(record).expect("records serialize");
    // write-then-rename so an interrupted run never leaves a marker behind
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text + "\n").map_err(|e| LabError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistic {
    Avg,
    Min,
    Max,
}

impl Statistic {
    fn label(self) -> &'static str {
        match self {
            Statistic::Avg => "avg.",
            Statistic::Min => "min",
            Statistic::Max => "max",
        }
    }

    fn of(self, r: &RunReport) -> f64 {
        match self {
            Statistic::Avg => r.avg,
            Statistic::Min => r.min,
            Statistic::Max => r.max,
        }
    }
}

/// Tab-separated table: one column per ablated layer set (in first-seen
/// order), one row per (statistic, variant). Missing cells print `-`.
pub fn format_table(reports: &[RunReport], stats: &[Statistic]) -> String {
    let mut columns: Vec<&BTreeSet<usize>> = Vec::new();
    for r in reports {
        if !columns.contains(&&r.cell.ablated_layers) {
            columns.push(&r.cell.ablated_layers);
        }
    }
    let mut variants: Vec<bool> = Vec::new();
    for pe in [true, false] {
        if reports.iter().any(|r| r.cell.use_positional_encoding == pe) {
            variants.push(pe);
        }
    }
    let mut out = String::from("Layers without RC");
    for c in &columns {
        out.push('\t');
        out.push_str(&format_layer_set(c));
    }
    out.push('\n');
    for &stat in stats {
        for &pe in &variants {
            let name = if pe { "Original" } else { "NoPE" };
            out.push_str(&format!("{name} ({})", stat.label()));
            for c in &columns {
                let cell = reports
                    .iter()
                    .find(|r| r.cell.use_positional_encoding == pe && &&r.cell.ablated_layers == c);
                out.push('\t');
                match cell {
                    Some(r) => out.push_str(&format!("{:.2}", stat.of(r))),
                    None => out.push('-'),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `table.tsv` (averages) and `table_minmax.tsv` into `out`.
pub fn write_tables(reports: &[RunReport], out: &Path) -> Result<()> {
    for (name, stats) in [
        ("table.tsv", &[Statistic::Avg][..]),
        ("table_minmax.tsv", &[Statistic::Min, Statistic::Max][..]),
    ] {
        let path = out.join(name);
        std::fs::write(&path, format_table(reports, stats)).map_err(|e| LabError::io(&path, e))?;
    }
    Ok(())
}

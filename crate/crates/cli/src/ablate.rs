//! Ablation grid: toggles {step reduction, dynamic timestep sampling,
//! self-compare} x loss kinds x lambda values x seeds, all sharing one
//! distilled 4-step base per seed. Rows are appended to a CSV as cells
//! finish, and completed (cell, seed) pairs are skipped on resume.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowdistill_core::pad::{LossKind, StageConfig};
use flowdistill_core::toydata::Dataset;
use flowdistill_core::{Error, Result};

use crate::config::RunConfig;
use crate::pipeline::{ensure_stage0, eval_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub step_reduction: bool,
    pub dynamic_ts: bool,
    pub self_compare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub toggles: Vec<Toggles>,
    pub loss_kinds: Vec<LossKind>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read grid {}: {e}", path.display())))?;
        let grid: AblationGrid =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid grid: {e}")))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.toggles.is_empty() || self.loss_kinds.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("ablation grid axes must be nonempty"));
        }
        for &l in &self.lambdas {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One resolved grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub toggles: Toggles,
    pub loss_kind: LossKind,
    /// Effective self-compare weight (0 when the toggle is off).
    pub lambda: f64,
}

/// The metrics table schema shared by `ablate` and `eval`.
pub const TABLE_COLUMNS: [&str; 12] = [
    "cell_id",
    "step_reduction",
    "dynamic_ts",
    "self_compare",
    "loss_kind",
    "lambda",
    "seed",
    "fd",
    "energy",
    "sync",
    "nfe",
    "wall_ms",
];

fn cell_id(t: &Toggles, kind: LossKind, lambda: f64) -> String {
    format!(
        "sr{}_dt{}_sc{}_{}_lam{:.2}",
        t.step_reduction as u8, t.dynamic_ts as u8, t.self_compare as u8, kind, lambda
    )
}

/// Expand the grid into unique cells. Turning self-compare off forces
/// lambda to 0, so those cells collapse across the lambda axis.
pub fn cells(grid: &AblationGrid) -> Vec<Cell> {
    let mut out: Vec<Cell> = Vec::new();
    let mut seen = HashSet::new();
    for t in &grid.toggles {
        for &kind in &grid.loss_kinds {
            for &lambda in &grid.lambdas {
                let eff = if t.self_compare { lambda } else { 0.0 };
                let id = cell_id(t, kind, eff);
                if seen.insert(id.clone()) {
                    out.push(Cell { id, toggles: *t, loss_kind: kind, lambda: eff });
                }
            }
        }
    }
    out
}

/// Stage list for one cell: step reduction off collapses the phases into a
/// single direct 4 -> 1 stage with the same total budget; dynamic sampling
/// off zeroes the warm-up; self-compare off zeroes lambda.
pub fn stage_configs_for_cell(base: &[StageConfig], cell: &Cell) -> Vec<StageConfig> {
    if cell.toggles.step_reduction {
        base.iter()
            .cloned()
            .map(|mut s| {
                s.loss_kind = cell.loss_kind;
                s.lambda = cell.lambda;
                if !cell.toggles.dynamic_ts {
                    s.warmup = 0;
                }
                s
            })
            .collect()
    } else {
        let template = &base[base.len() - 1];
        vec![StageConfig {
            k: 3,
            target_schedule: vec![1.0],
            prev_final_t: 0.25,
            warmup: if cell.toggles.dynamic_ts { template.warmup } else { 0 },
            steps: base.iter().map(|s| s.steps).sum(),
            lambda: cell.lambda,
            gamma: template.gamma,
            sigma_r: template.sigma_r,
            loss_kind: cell.loss_kind,
            lr_gen: template.lr_gen,
            lr_disc: template.lr_disc,
            batch_size: template.batch_size,
        }]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub cell_id: String,
    pub step_reduction: bool,
    pub dynamic_ts: bool,
    pub self_compare: bool,
    pub loss_kind: String,
    pub lambda: f64,
    pub seed: u64,
    pub fd: f64,
    pub energy: f64,
    pub sync: f64,
    pub nfe: u64,
    pub wall_ms: f64,
}

impl TableRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.cell_id.clone(),
            self.step_reduction.to_string(),
            self.dynamic_ts.to_string(),
            self.self_compare.to_string(),
            self.loss_kind.clone(),
            format!("{:.4}", self.lambda),
            self.seed.to_string(),
            format!("{:.6}", self.fd),
            format!("{:.6}", self.energy),
            format!("{:.6}", self.sync),
            self.nfe.to_string(),
            format!("{:.3}", self.wall_ms),
        ]
    }
}

/// (cell_id, seed) pairs already present in an existing table.
fn completed_pairs(path: &Path) -> Result<HashSet<(String, u64)>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(format!("csv: {e}")))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("csv: {e}")))?;
        if rec.len() < 7 {
            continue;
        }
        let seed: u64 = rec[6].parse().map_err(|_| Error::data("bad seed column"))?;
        done.insert((rec[0].to_string(), seed));
    }
    Ok(done)
}

/// Run one cell for one seed: pad-distill from the shared stage-0 checkpoint
/// and evaluate at 1 evaluation per sample.
pub fn run_cell(
    base: &RunConfig,
    data: &Dataset,
    eval_data: &Dataset,
    work_dir: &Path,
    cell: &Cell,
    seed: u64,
) -> Result<TableRow> {
    let stage0 = ensure_stage0(base, data, work_dir, seed)?;
    let mut cfg = base.clone();
    cfg.seed = seed;
    let stages = stage_configs_for_cell(&base.pad, cell);
    let ks: Vec<usize> = stages.iter().map(|s| s.k).collect();
    cfg.pad = stages;
    let cell_dir = work_dir.join(format!("seed{seed}")).join(&cell.id);
    let paths = crate::pipeline::distill_pad_to(&cfg, &stage0, data, &ks, &cell_dir)?.into_result()?;
    let last = paths.last().ok_or_else(|| Error::data("no stage checkpoint produced"))?;
    let (report, _) = eval_checkpoint(last, 1, None, eval_data, base.eval.n_eval, seed)?;
    Ok(TableRow {
        cell_id: cell.id.clone(),
        step_reduction: cell.toggles.step_reduction,
        dynamic_ts: cell.toggles.dynamic_ts,
        self_compare: cell.toggles.self_compare,
        loss_kind: cell.loss_kind.to_string(),
        lambda: cell.lambda,
        seed,
        fd: report.fd,
        energy: report.energy,
        sync: report.sync,
        nfe: report.nfe_per_sample,
        wall_ms: report.wall_ms,
    })
}

/// Run the whole grid, appending to `out_csv` row by row. Cells run in
/// parallel; each is single-threaded and deterministic given its seed.
pub fn run_grid(
    base: &RunConfig,
    grid: &AblationGrid,
    data: &Dataset,
    eval_data: &Dataset,
    work_dir: &Path,
    out_csv: &Path,
) -> Result<usize> {
    grid.validate()?;
    let done = completed_pairs(out_csv)?;
    let all_cells = cells(grid);

    // Shared per-seed bases first, sequential per seed.
    for &seed in &grid.seeds {
        ensure_stage0(base, data, work_dir, seed)?;
    }

    let need_header = !out_csv.exists();
    if let Some(dir) = out_csv.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = std::fs::OpenOptions::new().create(true).append(true).open(out_csv)?;
    let writer = Mutex::new(file);
    if need_header {
        let mut f = writer.lock().unwrap();
        writeln!(f, "{}", TABLE_COLUMNS.join(","))?;
    }

    let jobs: Vec<(Cell, u64)> = all_cells
        .iter()
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c.clone(), s)))
        .filter(|(c, s)| !done.contains(&(c.id.clone(), *s)))
        .collect();

    let results: Vec<Result<()>> = jobs
        .par_iter()
        .map(|(cell, seed)| {
            let row = run_cell(base, data, eval_data, work_dir, cell, *seed)?;
            let mut f = writer.lock().unwrap();
            writeln!(f, "{}", row.record().join(","))?;
            f.flush()?;
            Ok(())
        })
        .collect();
    let mut completed = 0;
    for r in results {
        r?;
        completed += 1;
    }
    Ok(completed)
}

//! Parameter sweeps with paired seeds.
//!
//! A sweep trains one cell per (axis value, seed), probes it, and writes each
//! finished cell to its own directory before the aggregate tables are built.
//! Every value uses the same seeds, so comparisons between values are paired.
//!
//! Output layout under the sweep directory:
//!
//! - `sweep.json`: the spec with a resolved base config,
//! - `rows/v{value index}_s{seed}/`: `config.resolved.json`, `metrics.jsonl`, `row.json`,
//! - `sweep.csv`, `summary.json`, `summary.md`: reductions over the rows.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{extract_features, linear_probe, LinearProbe, ProbeResult};
use crate::losses::Variant;
use crate::training::{self, TrainOutcome};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CEBMV_THREADS";

/// Worker count from [`THREADS_ENV`], or `None` when unset or invalid.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Sizes the global worker pool from [`THREADS_ENV`]. Call once, before any
/// parallel work.
pub fn init_thread_pool() -> Result<()> {
    if let Some(n) = thread_cap() {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Beta,
    AreaLowerBound,
    KappaE,
    KappaB,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Beta, Axis::AreaLowerBound, Axis::KappaE, Axis::KappaB];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::AreaLowerBound => "area_lower_bound",
            Axis::KappaE => "kappa_e",
            Axis::KappaB => "kappa_b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }

    /// Published grid of the axis; the `kappa_e` grid depends on the family.
    pub fn default_values(self, variant: Variant) -> Vec<f64> {
        match self {
            Axis::Beta => vec![0.0, 0.01, 0.1, 1.0, 1.5, 2.0],
            Axis::AreaLowerBound => vec![0.08, 0.16, 0.25, 0.5],
            Axis::KappaE if variant.is_byol() => vec![4096.0, 8192.0, 16384.0, 32768.0],
            Axis::KappaE => vec![256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0],
            Axis::KappaB => vec![1.0, 3.0, 10.0, 15.0, 20.0],
        }
    }

    /// Writes `value` into the field this axis controls.
    pub fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            Axis::Beta => cfg.train.loss.beta = Some(value),
            Axis::AreaLowerBound => cfg.train.augment.area_lower_bound = value,
            Axis::KappaE => cfg.train.loss.kappa_e = Some(value),
            Axis::KappaB => cfg.train.loss.kappa_b = Some(value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base: RunConfig,
}

fn default_n_seeds() -> usize {
    3
}

impl SweepSpec {
    /// Spec over the axis' default grid.
    pub fn new(axis: Axis, n_seeds: usize, base: RunConfig) -> Self {
        Self { axis, values: axis.default_values(base.train.loss.variant), n_seeds, base }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep values must not be empty".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("sweep n_seeds must be positive".into()));
        }
        for v in &self.values {
            let mut c = self.base.clone();
            self.axis.apply(&mut c, *v);
            c.resolved().validate()?;
        }
        Ok(())
    }

    /// Seeds shared by every value.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|s| self.base.train.seed + s).collect()
    }

    /// Resolved config of one cell.
    pub fn cell_config(&self, value: f64, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        c.set_seed(seed);
        self.axis.apply(&mut c, value);
        c.resolved()
    }

    pub fn resolved(&self) -> Self {
        Self { base: self.base.resolved(), ..self.clone() }
    }
}

/// A trained and probed configuration.
#[derive(Clone, Debug)]
pub struct Cell {
    pub outcome: TrainOutcome,
    /// Absent when the representation of a collapsed run is not finite.
    pub probe: Option<(LinearProbe, ProbeResult)>,
}

impl Cell {
    pub fn collapsed(&self) -> bool {
        self.outcome.collapse.is_some()
    }

    pub fn top1(&self) -> Option<f64> {
        self.probe.as_ref().map(|p| p.1.top1)
    }
}

/// Both splits of `cfg.data`.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok((data::generate(&cfg.data, Split::Train)?, data::generate(&cfg.data, Split::Test)?))
}

/// Probes `outcome` at `cfg.eval.label_fraction`.
pub fn probe_outcome(cfg: &RunConfig, outcome: TrainOutcome, train: &Dataset, test: &Dataset) -> Result<Cell> {
    let ftr = extract_features(&outcome.stack, &train.features()?)?;
    let fte = extract_features(&outcome.stack, &test.features()?)?;
    if outcome.collapse.is_some() && !(ftr.all_finite() && fte.all_finite()) {
        return Ok(Cell { outcome, probe: None });
    }
    let probe = linear_probe(&ftr, &train.labels(), &fte, &test.labels(), cfg.eval.label_fraction, cfg.eval.seed)?;
    Ok(Cell { outcome, probe: Some(probe) })
}

/// Trains and probes on pre-generated splits of `cfg.data`.
pub fn run_cell_on(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Cell> {
    cfg.validate()?;
    if train.config != cfg.data || test.config != cfg.data {
        return Err(Error::Config("datasets were not generated from this config".into()));
    }
    let outcome = training::train(&cfg.train, train)?;
    probe_outcome(cfg, outcome, train, test)
}

pub fn run_cell(cfg: &RunConfig) -> Result<Cell> {
    let (train, test) = datasets(cfg)?;
    run_cell_on(cfg, &train, &test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub seed: u64,
    pub top1: Option<f64>,
    pub brier: Option<f64>,
    pub collapsed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis_value: f64,
    pub n: usize,
    pub n_collapsed: usize,
    pub top1_mean: Option<f64>,
    pub top1_std: Option<f64>,
    pub brier_mean: Option<f64>,
    pub brier_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and sample standard deviation; `None` for an empty slice.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some((m, s))
}

/// Groups rows by value, keeping the order of `values`.
pub fn summarize(axis: Axis, values: &[f64], rows: Vec<SweepRow>) -> SweepTable {
    let summary = values
        .iter()
        .map(|&v| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.axis_value.to_bits() == v.to_bits()).collect();
            let top: Vec<f64> = group.iter().filter_map(|r| r.top1).collect();
            let bri: Vec<f64> = group.iter().filter_map(|r| r.brier).collect();
            let (t, b) = (mean_std(&top), mean_std(&bri));
            SummaryRow {
                axis_value: v,
                n: group.len(),
                n_collapsed: group.iter().filter(|r| r.collapsed).count(),
                top1_mean: t.map(|x| x.0),
                top1_std: t.map(|x| x.1),
                brier_mean: b.map(|x| x.0),
                brier_std: b.map(|x| x.1),
            }
        })
        .collect();
    SweepTable { axis, rows, summary }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

impl SweepTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("axis_value,seed,top1,brier,collapsed\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.axis_value, r.seed, opt(r.top1), opt(r.brier), r.collapsed));
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = format!(
            "| {} | top1 mean | top1 std | brier mean | brier std | collapsed |\n|---|---|---|---|---|---|\n",
            self.axis.name()
        );
        for r in &self.summary {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {}/{} |\n",
                r.axis_value,
                opt_fixed(r.top1_mean),
                opt_fixed(r.top1_std),
                opt_fixed(r.brier_mean),
                opt_fixed(r.brier_std),
                r.n_collapsed,
                r.n
            ));
        }
        s
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T, what: &str) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::json(what, e))?;
    s.push('\n');
    Ok(s)
}

/// Directory of one cell.
pub fn row_dir(out_dir: &Path, value_index: usize, seed: u64) -> PathBuf {
    out_dir.join("rows").join(format!("v{value_index}_s{seed}"))
}

fn run_row(spec: &SweepSpec, out_dir: &Path, vi: usize, seed: u64) -> Result<SweepRow> {
    let value = spec.values[vi];
    let cfg = spec.cell_config(value, seed);
    let dir = row_dir(out_dir, vi, seed);
    let config_text = cfg.to_json()?;
    let row_path = dir.join("row.json");
    let existing = std::fs::read_to_string(dir.join(RESOLVED_CONFIG_FILE)).ok();
    if existing.as_deref() == Some(config_text.as_str()) {
        if let Ok(text) = std::fs::read_to_string(&row_path) {
            if let Ok(row) = serde_json::from_str::<SweepRow>(&text) {
                log::info!("reusing {}", row_path.display());
                return Ok(row);
            }
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(RESOLVED_CONFIG_FILE), &config_text)?;
    let cell = run_cell(&cfg)?;
    write(&dir.join("metrics.jsonl"), &cell.outcome.metrics_jsonl()?)?;
    let row = SweepRow {
        axis_value: value,
        seed,
        top1: cell.top1(),
        brier: cell.probe.as_ref().map(|p| p.1.brier),
        collapsed: cell.collapsed(),
    };
    write(&row_path, &to_json(&row, "sweep row")?)?;
    log::info!("{}={value} seed {seed}: top1 {:?} collapsed {}", spec.axis.name(), row.top1, row.collapsed);
    Ok(row)
}

/// Runs every cell of `spec` under `out_dir`, then writes the aggregate
/// tables. Cells that finished before an error stay on disk and are reused
/// by a rerun with the same spec.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<SweepTable> {
    spec.validate()?;
    let spec = spec.resolved();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("sweep.json"), &to_json(&spec, "sweep spec")?)?;
    let jobs: Vec<(usize, u64)> = (0..spec.values.len())
        .flat_map(|vi| spec.seeds().into_iter().map(move |s| (vi, s)))
        .collect();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<SweepRow>> =
        pool.install(|| jobs.par_iter().map(|&(vi, s)| run_row(&spec, out_dir, vi, s)).collect());
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let table = summarize(spec.axis, &spec.values, rows);
    write(&out_dir.join("sweep.csv"), &table.csv())?;
    write(&out_dir.join("summary.json"), &to_json(&table.summary, "sweep summary")?)?;
    write(&out_dir.join("summary.md"), &table.markdown())?;
    Ok(table)
}

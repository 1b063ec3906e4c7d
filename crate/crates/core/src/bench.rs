//! Synthetic benchmark grid: generate datasets, run every method and
//! initialization, score against the generating group map and summarize.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{generate_dataset, GenerateConfig, Model};
use crate::infer::{init_greedy, init_random, run_icm, run_vb, InferenceOptions};
use crate::lattice::{LabelMap, LatticeDims};
use crate::seed;

const TAG_DATASET: u64 = 1;
const TAG_INIT: u64 = 2;

/// Fraction of sites where the estimate differs from the truth.
pub fn misclassification_rate(est: &LabelMap, truth: &LabelMap) -> Result<f64> {
    if est.dims() != truth.dims() || est.k() != truth.k() {
        return Err(Error::DimMismatch(format!(
            "estimate is {} with K = {}, truth is {} with K = {}",
            est.dims(),
            est.k(),
            truth.dims(),
            truth.k()
        )));
    }
    let wrong = est.values().iter().zip(truth.values()).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / est.len() as f64)
}

/// Relabels `est` by the label permutation that maximizes agreement with `truth`.
pub fn align_labels(est: &LabelMap, truth: &LabelMap) -> Result<LabelMap> {
    misclassification_rate(est, truth)?;
    let k = est.k();
    let mut counts = Matrix::new(k, k, 0i64);
    for (&e, &t) in est.values().iter().zip(truth.values()) {
        counts[(e, t)] += 1;
    }
    let (_, perm) = kuhn_munkres(&counts);
    est.relabel(&perm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Model I, coordinate ascent.
    IC,
    /// Model II, coordinate ascent.
    IIC,
    /// Model II, variational Bayes.
    IIV,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::IC => "IC",
            Method::IIC => "IIC",
            Method::IIV => "IIV",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Init {
    /// Uniform random labels.
    X01,
    /// Most frequent nonzero subject label.
    X02,
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::X01 => "X01",
            Init::X02 => "X02",
        })
    }
}

fn default_dims() -> LatticeDims {
    LatticeDims { rows: 64, cols: 64 }
}

fn default_repeats() -> usize {
    10
}

fn default_methods() -> Vec<Method> {
    vec![Method::IC, Method::IIC, Method::IIV]
}

fn default_inits() -> Vec<Init> {
    vec![Init::X01, Init::X02]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// `(M, K)` cells.
    pub grid: Vec<(usize, usize)>,
    #[serde(default = "default_dims")]
    pub dims: LatticeDims,
    pub data_model: Model,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_inits")]
    pub inits: Vec<Init>,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.methods.is_empty() || self.inits.is_empty() {
            return Err(Error::InvalidArgument("grid, methods and inits must be non-empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be >= 1".into()));
        }
        if let Some(&(m, k)) = self.grid.iter().find(|&&(m, k)| m == 0 || k < 2) {
            return Err(Error::InvalidArgument(format!("grid cell (M = {m}, K = {k}) needs M >= 1, K >= 2")));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record wall-clock time per run; otherwise the column is 0 so output
    /// bytes depend only on the configuration.
    pub timing: bool,
    /// Score after optimal label permutation instead of raw labels.
    pub align_labels: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset_id: String,
    pub m: usize,
    pub k: usize,
    pub method: Method,
    pub init: Init,
    pub repeat: usize,
    /// `None` when the run failed.
    pub misclassification: Option<f64>,
    pub iterations: usize,
    pub wall_time_ms: u64,
    pub status: String,
}

/// Seed of the dataset for cell `(m, k)` and repeat `r`.
pub fn dataset_seed(root: u64, m: usize, k: usize, repeat: usize) -> u64 {
    seed::derive(root, &[TAG_DATASET, m as u64, k as u64, repeat as u64])
}

fn init_seed(root: u64, m: usize, k: usize, repeat: usize) -> u64 {
    seed::derive(root, &[TAG_INIT, m as u64, k as u64, repeat as u64])
}

fn run_one(
    method: Method,
    subjects: &[LabelMap],
    x0: &LabelMap,
) -> Result<(LabelMap, usize, bool)> {
    let state = match method {
        Method::IC => run_icm(subjects, x0, &InferenceOptions::icm(Model::ModelI))?,
        Method::IIC => run_icm(subjects, x0, &InferenceOptions::icm(Model::ModelII))?,
        Method::IIV => run_vb(subjects, x0, &InferenceOptions::vb(Model::ModelII))?,
    };
    Ok((state.x, state.iteration, state.converged))
}

fn run_cell(cfg: &ExperimentConfig, m: usize, k: usize, repeat: usize, opts: RunOptions) -> Vec<ResultRow> {
    let dataset_id = format!("M{m}_K{k}_r{repeat}");
    let gen = GenerateConfig::new(m, k, cfg.dims, cfg.data_model, dataset_seed(cfg.root_seed, m, k, repeat));
    let row = |method, init, outcome: std::result::Result<(f64, usize, bool), String>, ms| {
        let (misclassification, iterations, status) = match outcome {
            Ok((rate, it, converged)) => (
                Some(rate),
                it,
                if converged { "ok".to_string() } else { "max-iterations".to_string() },
            ),
            Err(e) => (None, 0, format!("failed: {e}")),
        };
        ResultRow {
            dataset_id: dataset_id.clone(),
            m,
            k,
            method,
            init,
            repeat,
            misclassification,
            iterations,
            wall_time_ms: ms,
            status,
        }
    };
    let ds = match generate_dataset(&gen) {
        Ok(ds) => ds,
        Err(e) => {
            let msg = format!("generation: {e}");
            return cfg
                .inits
                .iter()
                .flat_map(|&init| cfg.methods.iter().map(move |&method| (method, init)))
                .map(|(method, init)| row(method, init, Err(msg.clone()), 0))
                .collect();
        }
    };
    let mut rows = Vec::new();
    for &init in &cfg.inits {
        let x0 = match init {
            Init::X01 => init_random(cfg.dims, k, init_seed(cfg.root_seed, m, k, repeat)),
            Init::X02 => init_greedy(&ds.subjects),
        };
        for &method in &cfg.methods {
            let start = Instant::now();
            let outcome = x0
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|x0| run_one(method, &ds.subjects, x0).map_err(|e| e.to_string()))
                .and_then(|(x, it, conv)| {
                    let scored = if opts.align_labels {
                        align_labels(&x, &ds.x).and_then(|a| misclassification_rate(&a, &ds.x))
                    } else {
                        misclassification_rate(&x, &ds.x)
                    };
                    scored.map(|r| (r, it, conv)).map_err(|e| e.to_string())
                });
            let ms = if opts.timing { start.elapsed().as_millis() as u64 } else { 0 };
            rows.push(row(method, init, outcome, ms));
        }
    }
    rows
}

/// Runs every cell and repeat in parallel; rows come back in configuration
/// order (cell, repeat, init, method) regardless of scheduling.
pub fn run_grid(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize, usize)> = cfg
        .grid
        .iter()
        .flat_map(|&(m, k)| (0..cfg.repeats).map(move |r| (m, k, r)))
        .collect();
    let rows: Vec<Vec<ResultRow>> = jobs
        .par_iter()
        .map(|&(m, k, r)| run_cell(cfg, m, k, r, opts))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Five-number summary plus mean of one (M, K, method, init) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub method: Method,
    pub init: Init,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Quantile with linear interpolation between order statistics
/// (position `(n - 1) p` in the sorted sample).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Groups successful rows by (M, K, method, init) in first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, usize, Method, Init)> = Vec::new();
    for r in rows {
        let key = (r.m, r.k, r.method, r.init);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .filter_map(|(m, k, method, init)| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| (r.m, r.k, r.method, r.init) == (m, k, method, init))
                .filter_map(|r| r.misclassification)
                .collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(SummaryRow {
                m,
                k,
                method,
                init,
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: quantile(&v, 0.5),
                min: v[0],
                max: v[v.len() - 1],
                q1: quantile(&v, 0.25),
                q3: quantile(&v, 0.75),
            })
        })
        .collect()
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "dataset_id",
        "M",
        "K",
        "method",
        "init",
        "repeat",
        "misclassification",
        "iterations",
        "wall_time_ms",
        "status",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset_id.clone(),
            r.m.to_string(),
            r.k.to_string(),
            r.method.to_string(),
            r.init.to_string(),
            r.repeat.to_string(),
            r.misclassification.map(fmt6).unwrap_or_default(),
            r.iterations.to_string(),
            r.wall_time_ms.to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["M", "K", "method", "init", "count", "mean", "median", "min", "max", "q1", "q3"])?;
    for s in summary {
        w.write_record([
            s.m.to_string(),
            s.k.to_string(),
            s.method.to_string(),
            s.init.to_string(),
            s.count.to_string(),
            fmt6(s.mean),
            fmt6(s.median),
            fmt6(s.min),
            fmt6(s.max),
            fmt6(s.q1),
            fmt6(s.q3),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One `boxplot_<M>_<K>.csv` per cell with a row per method and initialization.
pub fn write_boxplots(dir: &Path, summary: &[SummaryRow]) -> Result<Vec<PathBuf>> {
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for s in summary {
        if !cells.contains(&(s.m, s.k)) {
            cells.push((s.m, s.k));
        }
    }
    let mut written = Vec::new();
    for (m, k) in cells {
        let path = dir.join(format!("boxplot_{m}_{k}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(["method", "init", "min", "q1", "median", "q3", "max"])?;
        for s in summary.iter().filter(|s| (s.m, s.k) == (m, k)) {
            w.write_record([
                s.method.to_string(),
                s.init.to_string(),
                fmt6(s.min),
                fmt6(s.q1),
                fmt6(s.median),
                fmt6(s.q3),
                fmt6(s.max),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `results.csv`, `summary.csv` and the boxplot files into `dir`.
pub fn write_outputs(dir: &Path, rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results_csv(&dir.join("results.csv"), rows)?;
    let summary = summarize(rows);
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    write_boxplots(dir, &summary)?;
    Ok(summary)
}

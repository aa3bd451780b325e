//! Forecast scoring: mean absolute error over closed-loop forecasts, run
//! aggregation and the persistence reference.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{SequenceDataset, Split};
use crate::error::{ensure, Result};
use crate::model::Forecaster;

/// Sequences forecast together in one batched rollout.
pub const EVAL_BATCH: usize = 64;

/// `(1 / (T·n)) Σ |truth − pred|`.
pub fn mae(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    ensure!(
        truth.shape() == pred.shape(),
        Argument,
        "mae: shapes {:?} and {:?} differ",
        truth.shape(),
        pred.shape()
    );
    ensure!(!truth.is_empty(), Argument, "mae: empty input");
    let total: f64 = truth.iter().zip(pred.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / truth.len() as f64)
}

/// Absolute-error aggregates of one forecast pass over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitErrors {
    pub mae: f64,
    pub per_sequence: Vec<f64>,
    /// Mean over sequences and sites, one entry per forecast step.
    pub per_step: Vec<f64>,
    /// Mean over sequences and steps, one entry per site.
    pub per_site: Vec<f64>,
}

impl SplitErrors {
    /// Aggregates `|truth − pred|` blocks, one `T × n` block per sequence.
    pub fn from_blocks(blocks: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<Self> {
        ensure!(!blocks.is_empty(), Argument, "no sequences to score");
        let (steps, n) = blocks[0].0.shape();
        let mut per_step = vec![0.0; steps];
        let mut per_site = vec![0.0; n];
        let mut per_sequence = Vec::with_capacity(blocks.len());
        for (truth, pred) in blocks {
            per_sequence.push(mae(truth, pred)?);
            ensure!(truth.shape() == (steps, n), Argument, "blocks have differing shapes");
            for t in 0..steps {
                for i in 0..n {
                    let e = (truth[(t, i)] - pred[(t, i)]).abs();
                    per_step[t] += e;
                    per_site[i] += e;
                }
            }
        }
        let s = blocks.len() as f64;
        per_step.iter_mut().for_each(|v| *v /= s * n as f64);
        per_site.iter_mut().for_each(|v| *v /= s * steps as f64);
        let mae = per_sequence.iter().sum::<f64>() / s;
        Ok(Self {
            mae,
            per_sequence,
            per_step,
            per_site,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mae_mean: f64,
    /// Sample standard deviation over runs; 0 for a single run.
    pub mae_std: f64,
    /// Set when `mae_std` is the single-run placeholder.
    pub std_undefined: bool,
    pub per_run: Vec<f64>,
    pub per_step: Vec<f64>,
    pub per_site: Vec<f64>,
    pub tau: usize,
    pub horizon: usize,
    pub n_runs: usize,
    pub n_sequences: usize,
}

impl EvalReport {
    /// Combines runs: mean and sample std of the run MAEs, per-step and
    /// per-site curves averaged across runs.
    pub fn from_runs(model: &str, runs: &[SplitErrors], tau: usize, horizon: usize) -> Result<Self> {
        ensure!(!runs.is_empty(), Argument, "no runs to aggregate");
        let k = runs.len() as f64;
        let per_run: Vec<f64> = runs.iter().map(|r| r.mae).collect();
        let mean = per_run.iter().sum::<f64>() / k;
        let std = if runs.len() > 1 {
            (per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        let average = |pick: fn(&SplitErrors) -> &Vec<f64>| -> Vec<f64> {
            let len = pick(&runs[0]).len();
            (0..len).map(|i| runs.iter().map(|r| pick(r)[i]).sum::<f64>() / k).collect()
        };
        Ok(Self {
            model: model.to_string(),
            mae_mean: mean,
            mae_std: std,
            std_undefined: runs.len() == 1,
            per_run,
            per_step: average(|r| &r.per_step),
            per_site: average(|r| &r.per_site),
            tau,
            horizon,
            n_runs: runs.len(),
            n_sequences: runs[0].per_sequence.len(),
        })
    }

    pub fn write_per_step_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "time_index", "mae"])?;
        for (k, v) in self.per_step.iter().enumerate() {
            w.write_record([(k + 1).to_string(), (self.tau + k).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per site with its coordinates.
    pub fn write_per_site_csv<W: Write>(&self, writer: W, dataset: &SequenceDataset) -> Result<()> {
        let sites = dataset.sites();
        ensure!(sites.len() == self.per_site.len(), Argument, "site count does not match the report");
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["site_index".to_string()];
        header.extend((1..=sites.dim()).map(|k| format!("coord_{k}")));
        header.push("mae".into());
        w.write_record(&header)?;
        for (i, v) in self.per_site.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(sites.point(i).iter().map(|c| c.to_string()));
            row.push(v.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_protocol(dataset: &SequenceDataset, indices: &[usize], tau: usize, horizon: usize) -> Result<()> {
    ensure!(!indices.is_empty(), Config, "evaluation split is empty");
    ensure!(tau >= 1, Argument, "tau must be at least 1");
    ensure!(horizon >= 1, Argument, "forecast horizon must be at least 1");
    ensure!(
        tau + horizon <= dataset.seq_len(),
        Argument,
        "tau + T = {} exceeds sequence length {}",
        tau + horizon,
        dataset.seq_len()
    );
    Ok(())
}

/// Truth block `u_τ..u_{τ+T−1}` of one sequence as `T × n`.
fn truth_block(dataset: &SequenceDataset, s: usize, tau: usize, horizon: usize) -> DMatrix<f64> {
    DMatrix::from_fn(horizon, dataset.n_sites(), |t, i| dataset.frame(s, tau + t)[i])
}

/// Closed-loop forecasts of `model` on the listed sequences.
pub fn forecast_errors<M: Forecaster + ?Sized>(
    model: &M,
    dataset: &SequenceDataset,
    indices: &[usize],
    tau: usize,
    horizon: usize,
) -> Result<SplitErrors> {
    check_protocol(dataset, indices, tau, horizon)?;
    model.geometry().check_sites(dataset.sites())?;
    let mut blocks = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let observed = dataset.batch_frames(chunk, tau)?;
        let forecast = model.forecast(&observed, horizon)?;
        for (b, &s) in chunk.iter().enumerate() {
            let pred = DMatrix::from_fn(horizon, dataset.n_sites(), |t, i| forecast[t][(i, b)]);
            blocks.push((truth_block(dataset, s, tau, horizon), pred));
        }
    }
    SplitErrors::from_blocks(&blocks)
}

/// Single-run report of `model` on one split.
pub fn evaluate_model<M: Forecaster + ?Sized>(
    model: &M,
    dataset: &SequenceDataset,
    split: Split,
    tau: usize,
    horizon: usize,
) -> Result<EvalReport> {
    let errors = forecast_errors(model, dataset, &dataset.indices(split), tau, horizon)?;
    EvalReport::from_runs(model.name(), &[errors], tau, horizon)
}

/// Runs `run` once per seed (each run trains its own model) and aggregates.
pub fn evaluate_runs(
    model: &str,
    seeds: &[u64],
    tau: usize,
    horizon: usize,
    mut run: impl FnMut(u64) -> Result<SplitErrors>,
) -> Result<EvalReport> {
    let runs = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_runs(model, &runs, tau, horizon)
}

/// Repeats the last observed frame: `û_t = u_{τ−1}` for every `t ≥ τ`.
pub fn persistence_errors(dataset: &SequenceDataset, indices: &[usize], tau: usize, horizon: usize) -> Result<SplitErrors> {
    check_protocol(dataset, indices, tau, horizon)?;
    let blocks: Vec<_> = indices
        .iter()
        .map(|&s| {
            let last = dataset.frame(s, tau - 1);
            let pred = DMatrix::from_fn(horizon, dataset.n_sites(), |_, i| last[i]);
            (truth_block(dataset, s, tau, horizon), pred)
        })
        .collect();
    SplitErrors::from_blocks(&blocks)
}

pub fn persistence_baseline(dataset: &SequenceDataset, split: Split, tau: usize, horizon: usize) -> Result<EvalReport> {
    let errors = persistence_errors(dataset, &dataset.indices(split), tau, horizon)?;
    EvalReport::from_runs("persistence", &[errors], tau, horizon)
}

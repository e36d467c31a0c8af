//! The `run` command: one training run per `(theta, seed)` cell.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! summary.json
//! runs/<theta>/<seed>/rounds.jsonl
//! runs/<theta>/<seed>/metrics.csv
//! runs/<theta>/<seed>/train_devices.csv
//! runs/<theta>/<seed>/test_devices.csv      (only with a test split)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deltafl::data::Population;
use deltafl::fed::am::population_objectives;
use deltafl::fed::{am_meta, run_federated, Algorithm, EvalSnapshot, FederationConfig};
use deltafl::metrics::{
    mean_and_std, scatter_export, summarize, summary_export, DeviceMetricTable, Summary,
    STANDARD_PERCENTILES,
};
use deltafl::models::ModelParams;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AlgorithmChoice, ExperimentConfig, SCHEMA_VERSION};

/// Final metrics of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub theta: f64,
    pub seed: u64,
    pub label: &'static str,
    pub train_loss: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_error: Option<Summary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaSummary {
    pub theta: f64,
    pub label: &'static str,
    pub seeds: Vec<u64>,
    pub train_loss: BTreeMap<String, Spread>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_error: Option<BTreeMap<String, Spread>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub algorithm: AlgorithmChoice,
    pub thetas: Vec<ThetaSummary>,
    pub cells: Vec<CellResult>,
}

/// Name shown for a cell; the filtered algorithm at `theta = 1` performs
/// exactly the FedAvg update.
pub fn cell_label(algorithm: AlgorithmChoice, theta: f64) -> &'static str {
    match algorithm {
        AlgorithmChoice::FedAvg => "fedavg",
        AlgorithmChoice::DeltaFl if theta == 1.0 => "fedavg-equivalent",
        AlgorithmChoice::DeltaFl => "deltafl",
        AlgorithmChoice::AmMeta => "am_meta",
    }
}

pub fn run_dir(output_dir: &Path, theta: f64, seed: u64) -> PathBuf {
    output_dir
        .join("runs")
        .join(theta.to_string())
        .join(seed.to_string())
}

/// Runs every cell (in parallel) and writes all artifacts.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let (train, test) = cfg.populations().context("building populations")?;
    let cells: Vec<(f64, u64)> = cfg
        .thetas
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(theta, seed)| {
            run_cell(cfg, &train, test.as_ref(), theta, seed)
                .with_context(|| format!("run theta={theta} seed={seed}"))
        })
        .collect::<Result<Vec<_>>>()?;

    let thetas = cfg
        .thetas
        .iter()
        .map(|&theta| {
            let group: Vec<&CellResult> = results.iter().filter(|c| c.theta == theta).collect();
            ThetaSummary {
                theta,
                label: cell_label(cfg.algorithm, theta),
                seeds: group.iter().map(|c| c.seed).collect(),
                train_loss: spread(group.iter().map(|c| &c.train_loss)),
                test_error: group
                    .iter()
                    .map(|c| c.test_error.as_ref())
                    .collect::<Option<Vec<_>>>()
                    .map(|s| spread(s.into_iter())),
            }
        })
        .collect();
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        algorithm: cfg.algorithm,
        thetas,
        cells: results,
    };
    summary_export(&summary, cfg.output_dir.join("summary.json"))?;
    Ok(summary)
}

fn spread<'a>(summaries: impl Iterator<Item = &'a Summary>) -> BTreeMap<String, Spread> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in summaries {
        columns.entry("mean".into()).or_default().push(s.mean);
        for (k, v) in &s.percentiles {
            columns.entry(k.clone()).or_default().push(*v);
        }
    }
    columns
        .into_iter()
        .map(|(k, v)| {
            let (mean, std) = mean_and_std(&v);
            (k, Spread { mean, std })
        })
        .collect()
}

fn run_cell(
    cfg: &ExperimentConfig,
    train: &Population,
    test: Option<&Population>,
    theta: f64,
    seed: u64,
) -> Result<CellResult> {
    let fed = cfg.cell(theta, seed);
    let dir = run_dir(&cfg.output_dir, theta, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (rounds_jsonl, snapshots, train_table, test_table) = match cfg.algorithm {
        AlgorithmChoice::FedAvg | AlgorithmChoice::DeltaFl => {
            let algorithm = if cfg.algorithm == AlgorithmChoice::FedAvg {
                Algorithm::FedAvg
            } else {
                Algorithm::DeltaFl
            };
            let out = run_federated(train, test, &fed, algorithm, None)?;
            (
                jsonl(&out.logs)?,
                out.snapshots,
                out.train_table,
                out.test_table,
            )
        }
        AlgorithmChoice::AmMeta => run_am_cell(cfg, &fed, train, test)?,
    };

    write(&dir.join("rounds.jsonl"), &rounds_jsonl)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&snapshots))?;
    scatter_export(&train_table, dir.join("train_devices.csv"))?;
    if let Some(t) = &test_table {
        scatter_export(t, dir.join("test_devices.csv"))?;
    }
    let last = snapshots.last().expect("a final snapshot is always taken");
    Ok(CellResult {
        theta,
        seed,
        label: cell_label(cfg.algorithm, theta),
        train_loss: last.train_loss.clone(),
        test_error: last.test_error.clone(),
    })
}

type CellArtifacts = (
    String,
    Vec<EvalSnapshot>,
    DeviceMetricTable,
    Option<DeviceMetricTable>,
);

/// Full-participation alternating minimization on the training devices.
fn run_am_cell(
    cfg: &ExperimentConfig,
    fed: &FederationConfig,
    train: &Population,
    test: Option<&Population>,
) -> Result<CellArtifacts> {
    let devices = population_objectives(train, fed.loss)?;
    let w0 = vec![0.0; fed.loss.param_dim(train.feature_dim())];
    let trace = am_meta(
        &devices,
        &train.weights(),
        fed.conformity(),
        fed.smoothing(),
        &cfg.am.inexactness,
        &cfg.am.w_step,
        fed.rounds,
        w0,
    )?;
    let mut snapshots = Vec::new();
    let mut tables = None;
    for it in &trace.iterates {
        if it.t % cfg.eval_every == 0 || it.t == fed.rounds {
            let (snap, train_table, test_table) =
                evaluate(train, test, fed, &ModelParams(it.w.clone()), it.t)?;
            snapshots.push(snap);
            tables = Some((train_table, test_table));
        }
    }
    let (train_table, test_table) = tables.expect("the last iterate is always evaluated");
    Ok((jsonl(&trace.iterates)?, snapshots, train_table, test_table))
}

fn evaluate(
    train: &Population,
    test: Option<&Population>,
    fed: &FederationConfig,
    w: &ModelParams,
    round: usize,
) -> Result<(EvalSnapshot, DeviceMetricTable, Option<DeviceMetricTable>)> {
    let train_table = DeviceMetricTable::train_losses(train, &fed.loss, w)?;
    let test_table = match test {
        Some(pop) if fed.loss.is_classification() => {
            Some(DeviceMetricTable::test_errors(pop, &fed.loss, w)?)
        }
        _ => None,
    };
    let snap = EvalSnapshot {
        round,
        train_loss: summarize(&train_table, &STANDARD_PERCENTILES)?,
        test_error: test_table
            .as_ref()
            .map(|t| summarize(t, &STANDARD_PERCENTILES))
            .transpose()?,
    };
    Ok((snap, train_table, test_table))
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// One row per snapshot and metric: `round,metric,mean,p20,...`.
pub fn metrics_csv(snapshots: &[EvalSnapshot]) -> String {
    let mut out = String::from("round,metric,mean");
    for tau in STANDARD_PERCENTILES {
        write!(out, ",{}", deltafl::metrics::percentile_key(tau)).unwrap();
    }
    out.push('\n');
    for snap in snapshots {
        let rows = [
            ("train_loss", Some(&snap.train_loss)),
            ("test_error", snap.test_error.as_ref()),
        ];
        for (name, summary) in rows {
            let Some(s) = summary else { continue };
            write!(out, "{},{name},{}", snap.round, s.mean).unwrap();
            for tau in STANDARD_PERCENTILES {
                write!(
                    out,
                    ",{}",
                    s.percentile(tau)
                        .expect("standard percentiles are summarized")
                )
                .unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

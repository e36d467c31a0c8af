//! FedAvg and filtered superquantile rounds.
//!
//! Randomness is keyed per round rather than threaded through a shared
//! generator: round `t` samples devices from stream `(seed, ROUND, t)`, and
//! device `k` trains with stream `(seed, LOCAL, t, k)`. Both algorithms
//! therefore see the same samples and the same local noise, which is what
//! makes the `theta = 1` filtered round coincide with FedAvg.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_schedule, EtaProtocol, FederationConfig, FilterSite, LocalSolver};
use crate::data::{DeviceShard, Population};
use crate::error::{Error, Result};
use crate::metrics::{summarize, DeviceMetricTable, Summary, STANDARD_PERCENTILES};
use crate::models::{batch_grad, device_loss, norm_sq, Example, LossSpec, ModelParams};
use crate::rng::{derive_key, stream, tag, StreamRng};
use crate::secure_agg::{secure_quantile_for_round, Aggregator, MmOptions};
use crate::superquantile::{superquantile, weighted_quantile, WeightedValues};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg,
    DeltaFl,
}

/// Per-round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Distinct sampled devices, ordered by id.
    pub sampled: Vec<String>,
    /// `F_k(w_t)` for each sampled device, aligned with `sampled`.
    pub losses: Vec<f64>,
    /// Loss threshold; absent for FedAvg.
    pub eta: Option<f64>,
    /// Devices whose update was aggregated (subset of `sampled`).
    pub filtered: Vec<String>,
    /// Sampled superquantile (mean for FedAvg) before and after the update.
    pub objective_before: f64,
    pub objective_after: f64,
    pub update_norm: f64,
    pub lr: f64,
}

/// Runs the local solver on one shard.
pub fn local_update(
    shard: &DeviceShard,
    w: &ModelParams,
    loss: &LossSpec,
    solver: LocalSolver,
    lr: f64,
    rng: &mut StreamRng,
) -> ModelParams {
    let mut w = w.0.clone();
    let n = shard.examples.len();
    let step = |w: &mut Vec<f64>, batch: &[&Example]| {
        let g = batch_grad(loss, w, batch);
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    };
    match solver {
        LocalSolver::Sgd { steps } => {
            for _ in 0..steps {
                let ex = &shard.examples[rng.random_range(0..n)];
                step(&mut w, &[ex]);
            }
        }
        LocalSolver::Epochs { epochs, batch_size } => {
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..epochs {
                order.shuffle(rng);
                for chunk in order.chunks(batch_size) {
                    let batch: Vec<&Example> = chunk.iter().map(|&i| &shard.examples[i]).collect();
                    step(&mut w, &batch);
                }
            }
        }
    }
    ModelParams(w)
}

/// Distinct device indices drawn with replacement, ordered by device id.
fn sample_devices(pop: &Population, cfg: &FederationConfig, t: usize) -> Vec<usize> {
    let mut rng = stream(cfg.seed, &[tag::ROUND, t as u64]);
    let n = pop.len();
    let set: BTreeSet<usize> = (0..cfg.devices_per_round)
        .map(|_| rng.random_range(0..n))
        .collect();
    let mut idx: Vec<usize> = set.into_iter().collect();
    idx.sort_by(|&a, &b| pop.shards()[a].id.cmp(&pop.shards()[b].id).then(a.cmp(&b)));
    idx
}

fn aggregator_for(cfg: &FederationConfig, t: usize, purpose: u64) -> Aggregator {
    Aggregator::new(
        cfg.aggregation,
        derive_key(cfg.seed, &[tag::MASK, t as u64, purpose]),
    )
}

fn losses_at(
    pop: &Population,
    cfg: &FederationConfig,
    w: &[f64],
    idx: &[usize],
) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&k| device_loss(&cfg.loss, w, &pop.shards()[k]))
        .collect()
}

fn sampled_objective(
    pop: &Population,
    cfg: &FederationConfig,
    losses: Vec<f64>,
    idx: &[usize],
    theta_applies: bool,
) -> Result<f64> {
    let weights = idx.iter().map(|&k| pop.shards()[k].weight).collect();
    let wv = WeightedValues::normalized(losses, weights)?;
    Ok(if theta_applies {
        superquantile(&wv, cfg.conformity())
    } else {
        wv.mean()
    })
}

fn train(
    pop: &Population,
    w: &ModelParams,
    cfg: &FederationConfig,
    t: usize,
    k: usize,
) -> ModelParams {
    let mut rng = stream(cfg.seed, &[tag::LOCAL, t as u64, k as u64]);
    local_update(
        &pop.shards()[k],
        w,
        &cfg.loss,
        cfg.local,
        lr_schedule(cfg, t),
        &mut rng,
    )
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm_sq(&d).sqrt()
}

fn check_round(pop: &Population, w: &ModelParams, cfg: &FederationConfig) -> Result<()> {
    if pop.is_empty() {
        return Err(Error::Empty("population"));
    }
    let expected = cfg.loss.param_dim(pop.feature_dim());
    if w.dim() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: w.dim(),
        });
    }
    Ok(())
}

/// One FedAvg round: every sampled device trains and the server averages
/// with weights `alpha_k`.
pub fn fedavg_round(
    pop: &Population,
    w: &ModelParams,
    cfg: &FederationConfig,
    t: usize,
) -> Result<(ModelParams, RoundLog)> {
    check_round(pop, w, cfg)?;
    let idx = sample_devices(pop, cfg, t);
    let losses = losses_at(pop, cfg, w, &idx)?;
    let contributions: Vec<(Vec<f64>, f64)> = idx
        .iter()
        .map(|&k| (train(pop, w, cfg, t, k).0, pop.shards()[k].weight))
        .collect();
    let next = ModelParams(aggregator_for(cfg, t, 0).weighted_average(&contributions)?);
    let ids: Vec<String> = idx.iter().map(|&k| pop.shards()[k].id.clone()).collect();
    let log = RoundLog {
        round: t,
        sampled: ids.clone(),
        losses: losses.clone(),
        eta: None,
        filtered: ids,
        objective_before: sampled_objective(pop, cfg, losses, &idx, false)?,
        objective_after: sampled_objective(
            pop,
            cfg,
            losses_at(pop, cfg, &next, &idx)?,
            &idx,
            false,
        )?,
        update_norm: distance(&next, w),
        lr: lr_schedule(cfg, t),
    };
    Ok((next, log))
}

/// The `(1 - theta)`-quantile of the sampled losses, by the configured protocol.
fn round_quantile(
    pop: &Population,
    cfg: &FederationConfig,
    t: usize,
    idx: &[usize],
    losses: &[f64],
) -> Result<f64> {
    let weights: Vec<f64> = idx.iter().map(|&k| pop.shards()[k].weight).collect();
    match cfg.eta_protocol {
        EtaProtocol::ServerDirect => {
            let wv = WeightedValues::normalized(losses.to_vec(), weights)?;
            Ok(weighted_quantile(&wv, cfg.conformity()))
        }
        EtaProtocol::SecureMm { max_iters, tol } => {
            let opts = MmOptions {
                max_iters,
                tol,
                init: None,
            };
            let mut agg = aggregator_for(cfg, t, 1);
            Ok(
                secure_quantile_for_round(losses, &weights, cfg.conformity(), &opts, &mut agg)?
                    .value,
            )
        }
    }
}

/// One filtered superquantile round.
///
/// Sampled devices report `F_k(w_t)`, the server forms `eta_t` (or uses
/// `frozen_eta` when reusing a previous threshold), devices with
/// `F_k(w_t) >= eta_t` train, and their models are averaged with weights
/// `alpha_k` renormalized over the survivors. If nobody survives (possible
/// only with a frozen threshold) the highest-loss sampled device trains alone.
pub fn deltafl_round(
    pop: &Population,
    w: &ModelParams,
    cfg: &FederationConfig,
    t: usize,
    frozen_eta: Option<f64>,
) -> Result<(ModelParams, RoundLog)> {
    check_round(pop, w, cfg)?;
    let idx = sample_devices(pop, cfg, t);
    let losses = losses_at(pop, cfg, w, &idx)?;
    let eta = match frozen_eta {
        Some(e) => e,
        None => round_quantile(pop, cfg, t, &idx, &losses)?,
    };

    let mut passed: Vec<bool> = losses.iter().map(|l| *l >= eta).collect();
    if !passed.iter().any(|p| *p) {
        let worst = (0..losses.len())
            .max_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(b.cmp(&a)))
            .expect("non-empty sample");
        passed[worst] = true;
    }

    let contributions: Vec<(Vec<f64>, f64)> = match cfg.filtering {
        FilterSite::Server => idx
            .iter()
            .zip(&passed)
            .filter(|(_, p)| **p)
            .map(|(&k, _)| (train(pop, w, cfg, t, k).0, pop.shards()[k].weight))
            .collect(),
        FilterSite::Client => idx
            .iter()
            .zip(&passed)
            .map(|(&k, &p)| {
                if p {
                    (train(pop, w, cfg, t, k).0, pop.shards()[k].weight)
                } else {
                    (w.0.clone(), 0.0)
                }
            })
            .collect(),
    };
    let next = ModelParams(aggregator_for(cfg, t, 0).weighted_average(&contributions)?);

    let filtered = idx
        .iter()
        .zip(&passed)
        .filter(|(_, p)| **p)
        .map(|(&k, _)| pop.shards()[k].id.clone())
        .collect();
    let log = RoundLog {
        round: t,
        sampled: idx.iter().map(|&k| pop.shards()[k].id.clone()).collect(),
        losses: losses.clone(),
        eta: Some(eta),
        filtered,
        objective_before: sampled_objective(pop, cfg, losses, &idx, true)?,
        objective_after: sampled_objective(
            pop,
            cfg,
            losses_at(pop, cfg, &next, &idx)?,
            &idx,
            true,
        )?,
        update_norm: distance(&next, w),
        lr: lr_schedule(cfg, t),
    };
    Ok((next, log))
}

/// Metrics of the model after `round` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub round: usize,
    /// Weighted training-loss distribution.
    pub train_loss: Summary,
    /// Unweighted test misclassification error, when a test population is given
    /// and the loss is a classification loss.
    pub test_error: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub final_model: ModelParams,
    pub snapshots: Vec<EvalSnapshot>,
    pub train_table: DeviceMetricTable,
    pub test_table: Option<DeviceMetricTable>,
}

fn evaluate(
    train: &Population,
    test: Option<&Population>,
    loss: &LossSpec,
    w: &[f64],
    round: usize,
) -> Result<(EvalSnapshot, DeviceMetricTable, Option<DeviceMetricTable>)> {
    let train_table = DeviceMetricTable::train_losses(train, loss, w)?;
    let test_table = match test {
        Some(pop) if loss.is_classification() => {
            Some(DeviceMetricTable::test_errors(pop, loss, w)?)
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

/// Runs `cfg.rounds` rounds from `w0` (zeros when `None`).
///
/// For the filtered algorithm `eta` is recomputed every `cfg.eta_period`
/// rounds and reused in between. Snapshots are taken before the first round,
/// every `cfg.eval_every` rounds, and after the last round.
pub fn run_federated(
    train: &Population,
    test: Option<&Population>,
    cfg: &FederationConfig,
    algorithm: Algorithm,
    w0: Option<ModelParams>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("population"));
    }
    let mut w = w0.unwrap_or_else(|| ModelParams::zeros(cfg.loss.param_dim(train.feature_dim())));
    let mut logs = Vec::with_capacity(cfg.rounds);
    let mut snapshots = Vec::new();
    let mut eta = None;

    for t in 0..cfg.rounds {
        if t % cfg.eval_every == 0 {
            snapshots.push(evaluate(train, test, &cfg.loss, &w, t)?.0);
        }
        let (next, log) = match algorithm {
            Algorithm::FedAvg => fedavg_round(train, &w, cfg, t)?,
            Algorithm::DeltaFl => {
                let frozen = if t % cfg.eta_period == 0 { None } else { eta };
                let out = deltafl_round(train, &w, cfg, t, frozen)?;
                eta = out.1.eta;
                out
            }
        };
        if !next.is_finite() {
            return Err(Error::invalid("lr", format!("model diverged at round {t}")));
        }
        w = next;
        logs.push(log);
    }
    let (snap, train_table, test_table) = evaluate(train, test, &cfg.loss, &w, cfg.rounds)?;
    if snapshots.last().map(|s| s.round) != Some(cfg.rounds) {
        snapshots.push(snap);
    }
    Ok(RunOutput {
        logs,
        final_model: w,
        snapshots,
        train_table,
        test_table,
    })
}

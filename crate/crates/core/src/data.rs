//! Device shards, populations, synthetic generators and device files.
//!
//! # Device file format
//!
//! JSON lines, one device per line:
//!
//! ```text
//! {"id": "dev-0", "x": [[0.1, 2.0], [1.5, -0.3]], "y": [0, 1], "weight": 0.25}
//! ```
//!
//! `x` holds one feature vector per example and `y` the matching class ids.
//! `weight` is optional; when every line omits it, weights are set
//! proportional to the number of examples. Floats are written in shortest
//! round-trip form, so save/load is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Example;
use crate::rng::{stream, tag};

/// One client's local dataset and its weight `alpha_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    pub id: String,
    pub examples: Vec<Example>,
    pub weight: f64,
}

impl DeviceShard {
    pub fn new(id: impl Into<String>, examples: Vec<Example>, weight: f64) -> Result<Self> {
        let id = id.into();
        if examples.is_empty() {
            return Err(Error::Empty("device shard"));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(
                "weight",
                format!("device {id}: {weight} is not positive"),
            ));
        }
        Ok(Self {
            id,
            examples,
            weight,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A set of devices with weights summing to one and a common feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    shards: Vec<DeviceShard>,
    feature_dim: usize,
}

impl Population {
    /// Validates dimensions and rescales the shard weights to sum to one.
    pub fn new(mut shards: Vec<DeviceShard>) -> Result<Self> {
        let first = shards.first().ok_or(Error::Empty("population"))?;
        let feature_dim = first.examples[0].x.len();
        for s in &shards {
            if s.examples.is_empty() {
                return Err(Error::Empty("device shard"));
            }
            if let Some(ex) = s.examples.iter().find(|e| e.x.len() != feature_dim) {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: ex.x.len(),
                });
            }
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(Error::invalid(
                    "weight",
                    format!("device {}: {}", s.id, s.weight),
                ));
            }
        }
        // Already-normalized weights are kept bit-for-bit so files round-trip.
        let total: f64 = shards.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            for s in &mut shards {
                s.weight /= total;
            }
        }
        Ok(Self {
            shards,
            feature_dim,
        })
    }

    pub fn shards(&self) -> &[DeviceShard] {
        &self.shards
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// One more than the largest label present (at least 2).
    pub fn num_classes(&self) -> usize {
        let max = self
            .shards
            .iter()
            .flat_map(|s| s.examples.iter().map(|e| e.y))
            .max()
            .unwrap_or(0);
        (max as usize + 1).max(2)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.shards.iter().map(|s| s.weight).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.shards.iter().map(|s| s.id.as_str()).collect()
    }
}

/// Sets `alpha_k = n_k / sum_j n_j`.
pub fn weights_by_count(mut shards: Vec<DeviceShard>) -> Result<Population> {
    if shards.is_empty() {
        return Err(Error::Empty("population"));
    }
    for s in &mut shards {
        s.weight = s.examples.len() as f64;
    }
    Population::new(shards)
}

/// One shard per mean with `n_per_device` draws from `N(mu_k, I)`, uniform weights.
///
/// Device `k` draws from stream `(seed, DEVICE, k)`.
pub fn gen_gaussian_mixture(
    means: &[Vec<f64>],
    n_per_device: usize,
    seed: u64,
) -> Result<Population> {
    if means.len() < 2 {
        return Err(Error::invalid("means", "need at least two components"));
    }
    if n_per_device == 0 {
        return Err(Error::invalid("n_per_device", "must be at least 1"));
    }
    let shards = means
        .iter()
        .enumerate()
        .map(|(k, mu)| {
            let mut rng = stream(seed, &[tag::DEVICE, k as u64]);
            let examples = (0..n_per_device)
                .map(|_| {
                    let x = mu
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + z
                        })
                        .collect();
                    Example::new(x, 0)
                })
                .collect();
            DeviceShard::new(format!("gauss-{k}"), examples, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(shards)
}

/// Parameters of [`gen_hetero_logistic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroLogisticSpec {
    pub num_devices: usize,
    /// Inclusive range of examples per device.
    pub min_size: usize,
    pub max_size: usize,
    /// Feature dimension; the last feature is a constant 1 (intercept).
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Scale of the per-device perturbation of the shared labeling model, in `[0, 1]`.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl HeteroLogisticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::invalid("num_devices", "must be at least 1"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::invalid(
                "min_size",
                format!(
                    "size range [{}, {}] is empty or starts at 0",
                    self.min_size, self.max_size
                ),
            ));
        }
        if self.feature_dim < 2 {
            return Err(Error::invalid(
                "feature_dim",
                "need at least one feature plus the intercept",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::invalid(
                "heterogeneity",
                format!("{} is not in [0, 1]", self.heterogeneity),
            ));
        }
        Ok(())
    }
}

/// Scale of the shared labeling model; large enough that labels are mostly
/// determined by the features.
const SHARED_MODEL_SCALE: f64 = 2.0;

/// Heterogeneous logistic population.
///
/// A shared model `w_bar` (stream `(seed, POPULATION)`) is perturbed per device
/// as `w_k = w_bar + heterogeneity * delta_k` with standard normal `delta_k`;
/// device `k` then draws `n_k ~ U{min_size..=max_size}` Gaussian feature
/// vectors and samples each label from the softmax of `W_k x` (stream
/// `(seed, DEVICE, k)`). Binary problems use one weight row (logit `<w, x>`).
/// Weights are proportional to the device sizes.
pub fn gen_hetero_logistic(spec: &HeteroLogisticSpec) -> Result<Population> {
    spec.validate()?;
    let p = spec.feature_dim;
    let rows = if spec.num_classes == 2 {
        1
    } else {
        spec.num_classes
    };
    let mut shared_rng = stream(spec.seed, &[tag::POPULATION]);
    let shared: Vec<f64> = (0..rows * p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut shared_rng);
            SHARED_MODEL_SCALE * z / (p as f64).sqrt()
        })
        .collect();

    let shards = (0..spec.num_devices)
        .map(|k| {
            let mut rng = stream(spec.seed, &[tag::DEVICE, k as u64]);
            let model: Vec<f64> = shared
                .iter()
                .map(|s| {
                    let delta: f64 = StandardNormal.sample(&mut rng);
                    s + spec.heterogeneity * delta
                })
                .collect();
            let n = rng.random_range(spec.min_size..=spec.max_size);
            let examples = (0..n)
                .map(|_| {
                    let mut x: Vec<f64> = (0..p - 1)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    x.push(1.0);
                    let y = sample_label(&model, &x, spec.num_classes, &mut rng);
                    Example::new(x, y)
                })
                .collect();
            DeviceShard::new(format!("dev-{k:04}"), examples, n as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(shards)
}

fn sample_label(model: &[f64], x: &[f64], classes: usize, rng: &mut impl Rng) -> u32 {
    let p = x.len();
    let u: f64 = rng.random();
    if classes == 2 {
        let z: f64 = model.iter().zip(x).map(|(w, v)| w * v).sum();
        return u32::from(u < 1.0 / (1.0 + (-z).exp()));
    }
    let scores: Vec<f64> = (0..classes)
        .map(|c| {
            model[c * p..(c + 1) * p]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut acc = 0.0;
    for (c, e) in exps.iter().enumerate() {
        acc += e / total;
        if u < acc {
            return c as u32;
        }
    }
    (classes - 1) as u32
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceRecord {
    id: String,
    x: Vec<Vec<f64>>,
    y: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

/// Writes one JSON line per device, including its weight.
pub fn save_devices_jsonl(pop: &Population, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &pop.shards {
        let rec = DeviceRecord {
            id: s.id.clone(),
            x: s.examples.iter().map(|e| e.x.clone()).collect(),
            y: s.examples.iter().map(|e| e.y).collect(),
            weight: Some(s.weight),
        };
        let line = serde_json::to_string(&rec).expect("device records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a device file; see the module docs for the format.
pub fn load_devices_jsonl(path: impl AsRef<Path>) -> Result<Population> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut shards = Vec::new();
    let mut weighted = None;
    let mut feature_dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DeviceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.x.len() != rec.y.len() {
            return Err(parse_err(
                lineno,
                format!(
                    "device {}: {} feature rows but {} labels",
                    rec.id,
                    rec.x.len(),
                    rec.y.len()
                ),
            ));
        }
        if rec.x.is_empty() {
            return Err(parse_err(
                lineno,
                format!("device {} has no examples", rec.id),
            ));
        }
        for row in &rec.x {
            let dim = *feature_dim.get_or_insert(row.len());
            if row.len() != dim {
                return Err(parse_err(
                    lineno,
                    format!(
                        "device {}: feature row of length {} (expected {dim})",
                        rec.id,
                        row.len()
                    ),
                ));
            }
        }
        match (weighted, rec.weight.is_some()) {
            (None, w) => weighted = Some(w),
            (Some(a), b) if a != b => {
                return Err(parse_err(
                    lineno,
                    "weight given on some lines but not others".into(),
                ));
            }
            _ => {}
        }
        let n = rec.x.len() as f64;
        let examples = rec
            .x
            .into_iter()
            .zip(rec.y)
            .map(|(x, y)| Example::new(x, y))
            .collect();
        let shard = DeviceShard::new(rec.id.clone(), examples, rec.weight.unwrap_or(n))
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        shards.push(shard);
    }
    if shards.is_empty() {
        return Err(parse_err(0, "file contains no devices".into()));
    }
    Population::new(shards)
}

/// Random disjoint split into `(train, test)` with `round(fraction * N)`
/// training devices; weights are renormalized within each side.
pub fn split_devices(
    pop: &Population,
    fraction: f64,
    seed: u64,
) -> Result<(Population, Population)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "fraction",
            format!("{fraction} is not in (0, 1)"),
        ));
    }
    let n = pop.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(
            "fraction",
            format!("splitting {n} devices at {fraction} leaves one side empty"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::SPLIT]));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick =
        |idx: &[usize]| Population::new(idx.iter().map(|&i| pop.shards[i].clone()).collect());
    Ok((pick(&train_idx)?, pick(&test_idx)?))
}

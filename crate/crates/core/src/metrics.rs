//! Distributional evaluation over devices.
//!
//! Training losses are summarized with the device weights `alpha_k`; test
//! errors are summarized unweighted. Percentiles use the same lower-value
//! rule as [`weighted_quantile`], with no interpolation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Population;
use crate::error::{Error, Result};
use crate::models::{device_error, device_loss, LossSpec};
use crate::superquantile::{weighted_quantile, ConformityLevel, WeightedValues};

/// Percentile levels reported by default.
pub const STANDARD_PERCENTILES: [f64; 6] = [20.0, 50.0, 60.0, 80.0, 90.0, 95.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TrainLoss,
    TestError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetricRow {
    pub id: String,
    pub n_k: usize,
    pub alpha_k: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceMetricTable {
    pub kind: MetricKind,
    pub rows: Vec<DeviceMetricRow>,
}

impl DeviceMetricTable {
    pub fn new(kind: MetricKind, rows: Vec<DeviceMetricRow>) -> Result<Self> {
        for r in &rows {
            if !r.value.is_finite() {
                return Err(Error::invalid(
                    "value",
                    format!("device {}: non-finite metric", r.id),
                ));
            }
            if kind == MetricKind::TestError && !(0.0..=1.0).contains(&r.value) {
                return Err(Error::invalid(
                    "value",
                    format!("device {}: error {} outside [0, 1]", r.id, r.value),
                ));
            }
        }
        Ok(Self { kind, rows })
    }

    /// `F_k(w)` for every device of `pop`.
    pub fn train_losses(pop: &Population, spec: &LossSpec, w: &[f64]) -> Result<Self> {
        let rows = pop
            .shards()
            .iter()
            .map(|s| {
                Ok(DeviceMetricRow {
                    id: s.id.clone(),
                    n_k: s.len(),
                    alpha_k: s.weight,
                    value: device_loss(spec, w, s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(MetricKind::TrainLoss, rows)
    }

    /// Misclassification error for every device of `pop`.
    pub fn test_errors(pop: &Population, spec: &LossSpec, w: &[f64]) -> Result<Self> {
        let rows = pop
            .shards()
            .iter()
            .map(|s| {
                Ok(DeviceMetricRow {
                    id: s.id.clone(),
                    n_k: s.len(),
                    alpha_k: s.weight,
                    value: device_error(spec, w, s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(MetricKind::TestError, rows)
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }

    fn weighted(&self) -> Result<WeightedValues> {
        let values = self.values();
        match self.kind {
            MetricKind::TrainLoss => {
                WeightedValues::normalized(values, self.rows.iter().map(|r| r.alpha_k).collect())
            }
            MetricKind::TestError => WeightedValues::uniform(values),
        }
    }
}

/// Mean and percentiles; serializes as `{"mean": .., "p20": .., ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    #[serde(flatten)]
    pub percentiles: BTreeMap<String, f64>,
}

impl Summary {
    pub fn percentile(&self, tau: f64) -> Option<f64> {
        self.percentiles.get(&percentile_key(tau)).copied()
    }
}

pub fn percentile_key(tau: f64) -> String {
    if tau.fract() == 0.0 {
        format!("p{}", tau as i64)
    } else {
        format!("p{tau}")
    }
}

/// Value below which a `tau / 100` fraction of the (weighted) mass lies.
pub fn percentile(wv: &WeightedValues, tau: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&tau) {
        return Err(Error::invalid(
            "percentile",
            format!("{tau} is not in [0, 100]"),
        ));
    }
    if tau == 100.0 {
        return Ok(wv.max());
    }
    Ok(weighted_quantile(
        wv,
        ConformityLevel::new(1.0 - tau / 100.0)?,
    ))
}

pub fn summarize(table: &DeviceMetricTable, percentiles: &[f64]) -> Result<Summary> {
    if table.rows.is_empty() {
        return Err(Error::Empty("metric table"));
    }
    let wv = table.weighted()?;
    let percentiles = percentiles
        .iter()
        .map(|&tau| Ok((percentile_key(tau), percentile(&wv, tau)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Summary {
        mean: wv.mean(),
        percentiles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`, right-open except the last.
pub fn histogram(table: &DeviceMetricTable, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    let values = table.values();
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let idx = if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower: lo + i as f64 * width,
            upper: if i + 1 == bins {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            count,
        })
        .collect())
}

/// CSV `id,n_k,alpha_k,value`, rows sorted by id.
pub fn scatter_export(table: &DeviceMetricTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rows: Vec<&DeviceMetricRow> = table.rows.iter().collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    wtr.write_record(["id", "n_k", "alpha_k", "value"])
        .map_err(csv_err)?;
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scatter(path: impl AsRef<Path>) -> Result<Vec<DeviceMetricRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<DeviceMetricRow>, _>>()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
}

/// Pretty-printed JSON with a trailing newline.
pub fn summary_export<T: Serialize + ?Sized>(records: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, records).map_err(|e| Error::io(path, e.into()))?;
    writeln!(out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

//! Per-example losses, analytic gradients and device-level objectives.
//!
//! Parameter layouts:
//! - squared distance and binary logistic: `w` has the feature dimension `p`;
//! - multinomial logistic: `w` is a row-major `C x p` matrix.
//!
//! Binary labels are class ids `0`/`1`, mapped to signs `-1`/`+1`.

use serde::{Deserialize, Serialize};

use crate::data::DeviceShard;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `||x - w||^2` (mean estimation).
    SquaredDistance,
    /// `log(1 + exp(-y <w, x>))`, `y` in `{-1, +1}`.
    BinaryLogistic,
    /// `-log softmax_y(W x)`.
    MultinomialLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Coefficient of `(l2 / 2) ||w||^2`.
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    2
}

impl LossSpec {
    pub fn new(kind: LossKind, l2: f64, num_classes: usize) -> Result<Self> {
        let spec = Self {
            kind,
            l2,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn squared_distance() -> Self {
        Self {
            kind: LossKind::SquaredDistance,
            l2: 0.0,
            num_classes: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid(
                "l2",
                format!("{} must be a finite non-negative number", self.l2),
            ));
        }
        match self.kind {
            LossKind::MultinomialLogistic if self.num_classes < 2 => Err(Error::invalid(
                "num_classes",
                "multinomial loss needs at least 2 classes",
            )),
            _ => Ok(()),
        }
    }

    pub fn is_classification(&self) -> bool {
        self.kind != LossKind::SquaredDistance
    }

    /// Parameter dimension for feature dimension `p`.
    pub fn param_dim(&self, p: usize) -> usize {
        match self.kind {
            LossKind::SquaredDistance | LossKind::BinaryLogistic => p,
            LossKind::MultinomialLogistic => self.num_classes * p,
        }
    }

    fn check(&self, w: &[f64], ex: &Example) -> Result<()> {
        let expected = self.param_dim(ex.x.len());
        if w.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: w.len(),
            });
        }
        let classes = match self.kind {
            LossKind::SquaredDistance => return Ok(()),
            LossKind::BinaryLogistic => 2,
            LossKind::MultinomialLogistic => self.num_classes,
        };
        if ex.y as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label: ex.y,
                classes,
            });
        }
        Ok(())
    }
}

/// Flat model parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Deref for ModelParams {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One input/output pair. `y` is a class id; the squared-distance loss ignores it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: u32,
}

impl Example {
    pub fn new(x: Vec<f64>, y: u32) -> Self {
        Self { x, y }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `log(1 + exp(-m))` without overflow.
fn log1p_exp_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn class_scores(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let p = x.len();
    (0..classes)
        .map(|c| dot(&w[c * p..(c + 1) * p], x))
        .collect()
}

/// Softmax probabilities and log-sum-exp, max-shifted.
fn softmax(scores: &[f64]) -> (Vec<f64>, f64) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.into_iter().map(|e| e / z).collect(), m + z.ln())
}

fn sign(y: u32) -> f64 {
    if y == 1 {
        1.0
    } else {
        -1.0
    }
}

fn loss_unchecked(spec: &LossSpec, w: &[f64], ex: &Example) -> f64 {
    let data = match spec.kind {
        LossKind::SquaredDistance => ex.x.iter().zip(w).map(|(x, w)| (x - w).powi(2)).sum(),
        LossKind::BinaryLogistic => log1p_exp_neg(sign(ex.y) * dot(w, &ex.x)),
        LossKind::MultinomialLogistic => {
            let scores = class_scores(w, &ex.x, spec.num_classes);
            let (_, lse) = softmax(&scores);
            lse - scores[ex.y as usize]
        }
    };
    if spec.l2 > 0.0 {
        data + 0.5 * spec.l2 * norm_sq(w)
    } else {
        data
    }
}

/// Adds `scale * grad f(w; ex)` into `out`.
fn add_grad_unchecked(spec: &LossSpec, w: &[f64], ex: &Example, scale: f64, out: &mut [f64]) {
    match spec.kind {
        LossKind::SquaredDistance => {
            for ((o, wi), xi) in out.iter_mut().zip(w).zip(&ex.x) {
                *o += scale * 2.0 * (wi - xi);
            }
        }
        LossKind::BinaryLogistic => {
            let s = sign(ex.y);
            let coef = -s * sigmoid(-s * dot(w, &ex.x));
            for (o, xi) in out.iter_mut().zip(&ex.x) {
                *o += scale * coef * xi;
            }
        }
        LossKind::MultinomialLogistic => {
            let p = ex.x.len();
            let (probs, _) = softmax(&class_scores(w, &ex.x, spec.num_classes));
            for (c, pc) in probs.iter().enumerate() {
                let coef = pc - if c == ex.y as usize { 1.0 } else { 0.0 };
                for (o, xi) in out[c * p..(c + 1) * p].iter_mut().zip(&ex.x) {
                    *o += scale * coef * xi;
                }
            }
        }
    }
    if spec.l2 > 0.0 {
        for (o, wi) in out.iter_mut().zip(w) {
            *o += scale * spec.l2 * wi;
        }
    }
}

fn predict_unchecked(spec: &LossSpec, w: &[f64], x: &[f64]) -> u32 {
    match spec.kind {
        LossKind::BinaryLogistic => u32::from(dot(w, x) > 0.0),
        _ => {
            let scores = class_scores(w, x, spec.num_classes);
            let mut best = 0;
            for (c, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = c;
                }
            }
            best as u32
        }
    }
}

pub fn point_loss(spec: &LossSpec, w: &[f64], ex: &Example) -> Result<f64> {
    spec.check(w, ex)?;
    Ok(loss_unchecked(spec, w, ex))
}

pub fn point_grad(spec: &LossSpec, w: &[f64], ex: &Example) -> Result<Vec<f64>> {
    spec.check(w, ex)?;
    let mut g = vec![0.0; w.len()];
    add_grad_unchecked(spec, w, ex, 1.0, &mut g);
    Ok(g)
}

/// Predicted class; ties go to the lowest class index.
pub fn predict(spec: &LossSpec, w: &[f64], x: &[f64]) -> Result<u32> {
    if !spec.is_classification() {
        return Err(Error::NotClassification);
    }
    let expected = spec.param_dim(x.len());
    if w.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: w.len(),
        });
    }
    Ok(predict_unchecked(spec, w, x))
}

fn check_shard(spec: &LossSpec, w: &[f64], shard: &DeviceShard) -> Result<()> {
    if shard.examples.is_empty() {
        return Err(Error::Empty("device shard"));
    }
    shard.examples.iter().try_for_each(|ex| spec.check(w, ex))
}

/// Mean gradient over a batch of examples (no validation).
pub(crate) fn batch_grad(spec: &LossSpec, w: &[f64], batch: &[&Example]) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        add_grad_unchecked(spec, w, ex, scale, &mut g);
    }
    g
}

/// `F_k(w)`: mean point loss over the shard.
pub fn device_loss(spec: &LossSpec, w: &[f64], shard: &DeviceShard) -> Result<f64> {
    check_shard(spec, w, shard)?;
    let n = shard.examples.len() as f64;
    Ok(shard
        .examples
        .iter()
        .map(|ex| loss_unchecked(spec, w, ex))
        .sum::<f64>()
        / n)
}

/// Full-batch gradient of [`device_loss`].
pub fn device_grad(spec: &LossSpec, w: &[f64], shard: &DeviceShard) -> Result<Vec<f64>> {
    check_shard(spec, w, shard)?;
    let mut g = vec![0.0; w.len()];
    let scale = 1.0 / shard.examples.len() as f64;
    for ex in &shard.examples {
        add_grad_unchecked(spec, w, ex, scale, &mut g);
    }
    Ok(g)
}

/// Fraction of misclassified examples on the shard.
pub fn device_error(spec: &LossSpec, w: &[f64], shard: &DeviceShard) -> Result<f64> {
    if !spec.is_classification() {
        return Err(Error::NotClassification);
    }
    check_shard(spec, w, shard)?;
    let wrong = shard
        .examples
        .iter()
        .filter(|ex| predict_unchecked(spec, w, &ex.x) != ex.y)
        .count();
    Ok(wrong as f64 / shard.examples.len() as f64)
}

/// A differentiable per-device objective `F_k`.
pub trait DeviceObjective {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> f64;
    fn grad(&self, w: &[f64]) -> Vec<f64>;
}

/// Full-batch empirical loss of a shard. Dimensions are validated on construction.
#[derive(Debug, Clone, Copy)]
pub struct ShardObjective<'a> {
    spec: LossSpec,
    shard: &'a DeviceShard,
    dim: usize,
}

impl<'a> ShardObjective<'a> {
    pub fn new(spec: LossSpec, shard: &'a DeviceShard) -> Result<Self> {
        let first = shard.examples.first().ok_or(Error::Empty("device shard"))?;
        let dim = spec.param_dim(first.x.len());
        check_shard(&spec, &vec![0.0; dim], shard)?;
        Ok(Self { spec, shard, dim })
    }
}

impl DeviceObjective for ShardObjective<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let n = self.shard.examples.len() as f64;
        self.shard
            .examples
            .iter()
            .map(|ex| loss_unchecked(&self.spec, w, ex))
            .sum::<f64>()
            / n
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / self.shard.examples.len() as f64;
        for ex in &self.shard.examples {
            add_grad_unchecked(&self.spec, w, ex, scale, &mut g);
        }
        g
    }
}

/// `F(w) = 0.5 (w - c)^T H (w - c) + offset` with symmetric `H` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    hessian: Vec<f64>,
    center: Vec<f64>,
    offset: f64,
}

impl QuadraticObjective {
    pub fn new(hessian: Vec<f64>, center: Vec<f64>, offset: f64) -> Result<Self> {
        let d = center.len();
        if hessian.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: hessian.len(),
            });
        }
        for i in 0..d {
            for j in 0..i {
                if (hessian[i * d + j] - hessian[j * d + i]).abs() > 1e-12 {
                    return Err(Error::invalid("hessian", "matrix is not symmetric"));
                }
            }
        }
        Ok(Self {
            hessian,
            center,
            offset,
        })
    }

    /// `curvature/2 * ||w - c||^2 + offset`.
    pub fn isotropic(center: Vec<f64>, curvature: f64, offset: f64) -> Self {
        let d = center.len();
        let mut hessian = vec![0.0; d * d];
        for i in 0..d {
            hessian[i * d + i] = curvature;
        }
        Self {
            hessian,
            center,
            offset,
        }
    }

    /// Population loss `E ||xi - w||^2 = ||w - mu||^2 + d` of `xi ~ N(mu, I_d)`.
    pub fn gaussian_mean_estimation(mean: Vec<f64>) -> Self {
        let d = mean.len() as f64;
        Self::isotropic(mean, 2.0, d)
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    fn hess_times(&self, v: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        (0..d)
            .map(|i| dot(&self.hessian[i * d..(i + 1) * d], v))
            .collect()
    }
}

impl DeviceObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let r: Vec<f64> = w.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        0.5 * dot(&r, &self.hess_times(&r)) + self.offset
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = w.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        self.hess_times(&r)
    }
}

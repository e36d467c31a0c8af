//! Quantile and superquantile arithmetic over weighted collections of losses.
//!
//! For losses `x_k` with weights `alpha_k` and a conformity level `theta`, the
//! superquantile is the worst-case mixture loss over
//! `P_theta = { pi in simplex : pi_k <= alpha_k / theta }`. It also equals
//!
//! ```text
//! min_eta  eta + (1/theta) * sum_k alpha_k (x_k - eta)_+
//! ```
//!
//! whose minimizer is the weighted `(1 - theta)`-quantile. Replacing `(.)_+`
//! with the C^1 surrogate [`smoothed_plus`] gives the smoothed objective used
//! by the alternating-minimization solver.

use crate::error::{Error, Result};

/// Weight sums within this distance of one are accepted as-is.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Weight sums within this distance of one are silently renormalized.
pub const RENORMALIZE_TOL: f64 = 1e-9;

fn check_weight_sum(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(sum)
}

/// Finite values paired with strictly positive probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedValues {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedValues {
    /// Builds from weights that already sum to one (up to [`RENORMALIZE_TOL`]).
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::validate(&values, &weights)?;
        let sum = check_weight_sum(&weights)?;
        let weights = if (sum - 1.0).abs() > NORMALIZATION_TOL {
            weights.into_iter().map(|w| w / sum).collect()
        } else {
            weights
        };
        Ok(Self { values, weights })
    }

    /// Builds from arbitrary positive weights, dividing by their sum.
    pub fn normalized(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::validate(&values, &weights)?;
        let sum: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { values, weights })
    }

    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![1.0 / n.max(1) as f64; n])
    }

    fn validate(values: &[f64], weights: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(Error::Empty("weighted values"));
        }
        if values.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: weights.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("values", format!("non-finite value {v}")));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(
                "weights",
                format!("weight {w} is not strictly positive"),
            ));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(x, a)| x * a)
            .sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Indices sorted by `(value, original index)`.
    fn sorted_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]).then(a.cmp(&b)));
        order
    }
}

/// Conformity level `theta` in `(0, 1]`; `theta = 1` is plain averaging.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ConformityLevel(f64);

impl ConformityLevel {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::invalid("theta", format!("{theta} is not in (0, 1]")));
        }
        Ok(Self(theta))
    }

    pub const fn vanilla() -> Self {
        Self(1.0)
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_vanilla(self) -> bool {
        self.0 == 1.0
    }
}

/// Smoothing width `nu > 0` of [`smoothed_plus`].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SmoothingParam(f64);

impl SmoothingParam {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::invalid(
                "nu",
                format!("{nu} is not a positive finite number"),
            ));
        }
        Ok(Self(nu))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Mixture weights `pi` on the probability simplex (zeros allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Empty("mixture weights"));
        }
        if let Some(p) = pi.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::invalid(
                "pi",
                format!("entry {p} is negative or non-finite"),
            ));
        }
        let sum = check_weight_sum(&pi)?;
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Ok(Self(pi.into_iter().map(|p| p / sum).collect()));
        }
        Ok(Self(pi))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_alpha(pi: &MixtureWeights, alpha: &[f64]) -> Result<()> {
    if pi.0.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            expected: pi.0.len(),
            got: alpha.len(),
        });
    }
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::invalid(
            "alpha",
            "training weights must be strictly positive",
        ));
    }
    check_weight_sum(alpha).map(|_| ())
}

/// `min_k alpha_k / pi_k`, with `alpha_k / 0 = +inf`.
pub fn conformity(pi: &MixtureWeights, alpha: &[f64]) -> Result<f64> {
    check_alpha(pi, alpha)?;
    Ok(pi
        .0
        .iter()
        .zip(alpha)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, a)| a / p)
        .fold(f64::INFINITY, f64::min))
}

/// Whether `pi_k <= alpha_k / theta` for all `k` (tolerance `1e-12`).
pub fn in_feasible_set(pi: &MixtureWeights, alpha: &[f64], theta: ConformityLevel) -> Result<bool> {
    check_alpha(pi, alpha)?;
    Ok(pi
        .0
        .iter()
        .zip(alpha)
        .all(|(p, a)| *p <= a / theta.0 + 1e-12))
}

/// Weighted `(1 - theta)`-quantile: the smallest value whose cumulative
/// sorted weight reaches `1 - theta`. Equal values are interchangeable, so
/// a stable sort on `(value, index)` gives the same answer as merging ties.
pub fn weighted_quantile(wv: &WeightedValues, theta: ConformityLevel) -> f64 {
    let target = 1.0 - theta.0;
    let mut cum = 0.0;
    let order = wv.sorted_order();
    for &k in &order {
        cum += wv.weights[k];
        if cum >= target - NORMALIZATION_TOL {
            return wv.values[k];
        }
    }
    wv.values[*order.last().unwrap()]
}

/// `eta + (1/theta) * sum_k alpha_k (x_k - eta)_+`.
pub fn dual_objective(wv: &WeightedValues, theta: ConformityLevel, eta: f64) -> f64 {
    let tail: f64 = wv
        .values
        .iter()
        .zip(&wv.weights)
        .map(|(x, a)| a * (x - eta).max(0.0))
        .sum();
    eta + tail / theta.0
}

/// Superquantile at level `theta`; the weighted mean when `theta = 1`.
pub fn superquantile(wv: &WeightedValues, theta: ConformityLevel) -> f64 {
    if theta.is_vanilla() {
        return wv.mean();
    }
    dual_objective(wv, theta, weighted_quantile(wv, theta))
}

/// Smoothed positive part:
///
/// ```text
/// g(rho) = nu/2                     rho <= 0
///        = rho^2/(2 nu) + nu/2      0 < rho <= nu
///        = rho                      rho > nu
/// ```
pub fn smoothed_plus(rho: f64, nu: SmoothingParam) -> f64 {
    let nu = nu.0;
    if rho <= 0.0 {
        nu / 2.0
    } else if rho <= nu {
        rho * rho / (2.0 * nu) + nu / 2.0
    } else {
        rho
    }
}

/// Derivative of [`smoothed_plus`]: `clamp(rho / nu, 0, 1)`.
pub fn smoothed_plus_derivative(rho: f64, nu: SmoothingParam) -> f64 {
    if rho <= 0.0 {
        0.0
    } else if rho <= nu.0 {
        rho / nu.0
    } else {
        1.0
    }
}

/// `eta + (1/theta) * sum_k alpha_k g_nu(x_k - eta)`.
pub fn smoothed_objective(
    wv: &WeightedValues,
    theta: ConformityLevel,
    nu: SmoothingParam,
    eta: f64,
) -> f64 {
    let tail: f64 = wv
        .values
        .iter()
        .zip(&wv.weights)
        .map(|(x, a)| a * smoothed_plus(x - eta, nu))
        .sum();
    eta + tail / theta.0
}

/// Partial derivative of [`smoothed_objective`] in `eta`. Non-decreasing,
/// continuous and piecewise linear with kinks at `x_k` and `x_k - nu`.
pub fn smoothed_eta_derivative(
    wv: &WeightedValues,
    theta: ConformityLevel,
    nu: SmoothingParam,
    eta: f64,
) -> f64 {
    let active: f64 = wv
        .values
        .iter()
        .zip(&wv.weights)
        .map(|(x, a)| a * smoothed_plus_derivative(x - eta, nu))
        .sum();
    1.0 - active / theta.0
}

/// Closed interval `[lower, upper]` of minimizers in `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaInterval {
    pub lower: f64,
    pub upper: f64,
}

impl EtaInterval {
    /// Canonical single minimizer used downstream.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }

    pub fn contains(&self, eta: f64, tol: f64) -> bool {
        eta >= self.lower - tol && eta <= self.upper + tol
    }
}

/// Minimizers of `eta -> smoothed_objective(wv, theta, nu, eta)`.
///
/// The derivative is piecewise linear with breakpoints in
/// `S = {x_k} u {x_k - nu}`, so evaluating it on `S` brackets its zero set:
/// with `a` the smallest point of `S` where it is non-negative and `b` the
/// largest where it is non-positive, either the zero set is `[a, b]` or it is
/// the single root of the linear piece between `b` and `a`.
///
/// At `theta = 1` the true minimizer set is the half-line
/// `(-inf, min_k x_k - nu]`; its right end is returned as a degenerate
/// interval.
pub fn smoothed_eta_minimizers(
    wv: &WeightedValues,
    theta: ConformityLevel,
    nu: SmoothingParam,
) -> EtaInterval {
    let tol = 1e-12 / theta.0;
    let mut candidates: Vec<f64> = wv.values.iter().flat_map(|&x| [x, x - nu.0]).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let deriv: Vec<f64> = candidates
        .iter()
        .map(|&eta| smoothed_eta_derivative(wv, theta, nu, eta))
        .collect();

    // max S always satisfies deriv >= 0 (it equals 1) and min S always
    // satisfies deriv <= 0 (it equals 1 - 1/theta), so both exist.
    let ia = deriv
        .iter()
        .position(|&d| d >= -tol)
        .unwrap_or(candidates.len() - 1);
    let ib = deriv.iter().rposition(|&d| d <= tol).unwrap_or(0);
    let (a, b) = (candidates[ia], candidates[ib]);

    if deriv[ia] > tol {
        let (da, db) = (deriv[ia], deriv[ib]);
        let eta = b + (-db) * (a - b) / (da - db);
        EtaInterval {
            lower: eta,
            upper: eta,
        }
    } else {
        EtaInterval { lower: a, upper: b }
    }
}

/// `F_{theta,nu} = min_eta smoothed_objective`, evaluated at the canonical minimizer.
pub fn smoothed_superquantile(
    wv: &WeightedValues,
    theta: ConformityLevel,
    nu: SmoothingParam,
) -> f64 {
    let eta = smoothed_eta_minimizers(wv, theta, nu).midpoint();
    smoothed_objective(wv, theta, nu, eta)
}

/// Chain-rule coefficients `c_k = (alpha_k / theta) g'_nu(x_k - eta)`, so that
/// the gradient of the smoothed objective in the model is `sum_k c_k grad x_k`.
pub fn smoothed_device_coefficients(
    wv: &WeightedValues,
    theta: ConformityLevel,
    nu: SmoothingParam,
    eta: f64,
) -> Vec<f64> {
    wv.values
        .iter()
        .zip(&wv.weights)
        .map(|(x, a)| a / theta.0 * smoothed_plus_derivative(x - eta, nu))
        .collect()
}

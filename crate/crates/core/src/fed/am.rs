//! Full-participation alternating minimization of the smoothed objective
//!
//! ```text
//! Fbar(w, eta) = eta + (1/theta) sum_k alpha_k g_nu(F_k(w) - eta)
//! ```
//!
//! Each iteration takes an exact step in `eta` (the midpoint of the minimizer
//! interval) and an inexact step in `w`, run until a suboptimality
//! certificate drops below `eps_t`.

use serde::{Deserialize, Serialize};

use crate::data::Population;
use crate::error::{Error, Result};
use crate::models::{norm_sq, DeviceObjective, LossSpec, ShardObjective};
use crate::superquantile::{
    smoothed_device_coefficients, smoothed_eta_derivative, smoothed_eta_minimizers,
    smoothed_objective, ConformityLevel, SmoothingParam, WeightedValues,
};

/// `eps_t = initial * (t + 1)^(-exponent)`; summable because `exponent > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InexactnessSchedule {
    pub initial: f64,
    pub exponent: f64,
}

impl InexactnessSchedule {
    pub fn new(initial: f64, exponent: f64) -> Result<Self> {
        let s = Self { initial, exponent };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::invalid(
                "inexactness.initial",
                format!("{} is not positive", self.initial),
            ));
        }
        if !(self.exponent > 1.0 && self.exponent.is_finite()) {
            return Err(Error::invalid(
                "inexactness.exponent",
                format!(
                    "{} must exceed 1 for the schedule to be summable",
                    self.exponent
                ),
            ));
        }
        Ok(())
    }

    pub fn epsilon(&self, t: usize) -> f64 {
        self.initial * ((t + 1) as f64).powf(-self.exponent)
    }
}

impl Default for InexactnessSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            exponent: 1.5,
        }
    }
}

/// Gradient descent with Armijo backtracking for the `w`-step.
///
/// The step stops once `||grad||^2 / (2 * strong_convexity) <= eps_t`. This
/// bounds the suboptimality when the subproblem satisfies a Polyak-Lojasiewicz
/// inequality with constant at least `strong_convexity`; a smaller value makes
/// the certificate stricter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WStepSolver {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_strong_convexity")]
    pub strong_convexity: f64,
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
}

fn default_max_iters() -> usize {
    200_000
}

fn default_strong_convexity() -> f64 {
    1e-2
}

fn default_initial_step() -> f64 {
    1.0
}

impl Default for WStepSolver {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            strong_convexity: default_strong_convexity(),
            initial_step: default_initial_step(),
        }
    }
}

impl WStepSolver {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("w_step.max_iters", "must be at least 1"));
        }
        if !(self.strong_convexity > 0.0 && self.strong_convexity.is_finite()) {
            return Err(Error::invalid(
                "w_step.strong_convexity",
                "must be positive",
            ));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::invalid("w_step.initial_step", "must be positive"));
        }
        Ok(())
    }
}

/// State at the start of iteration `t`, after the `eta`-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmIterate {
    pub t: usize,
    pub w: Vec<f64>,
    pub eta: f64,
    /// `||grad_{w, eta} Fbar(w_t, eta_t)||`.
    pub grad_norm: f64,
    /// `d/d eta Fbar(w_t, eta_t)`; zero up to rounding after the exact step.
    pub eta_derivative: f64,
    /// `F_{theta,nu}(w_t) = Fbar(w_t, eta_t)`.
    pub objective: f64,
    /// Target of the following `w`-step (absent for the last record).
    pub epsilon: Option<f64>,
    /// Gradient steps taken by the following `w`-step.
    pub w_step_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmTrace {
    /// `rounds + 1` records, for `t = 0..=rounds`.
    pub iterates: Vec<AmIterate>,
    pub final_w: Vec<f64>,
}

impl AmTrace {
    pub fn grad_norms(&self) -> Vec<f64> {
        self.iterates.iter().map(|i| i.grad_norm).collect()
    }
}

fn check_devices<D: DeviceObjective>(devices: &[D], weights: &[f64], w: &[f64]) -> Result<()> {
    if devices.is_empty() {
        return Err(Error::Empty("devices"));
    }
    if weights.len() != devices.len() {
        return Err(Error::DimensionMismatch {
            expected: devices.len(),
            got: weights.len(),
        });
    }
    for d in devices {
        if d.dim() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: d.dim(),
                got: w.len(),
            });
        }
    }
    Ok(())
}

fn losses<D: DeviceObjective>(devices: &[D], weights: &[f64], w: &[f64]) -> Result<WeightedValues> {
    WeightedValues::new(
        devices.iter().map(|d| d.loss(w)).collect(),
        weights.to_vec(),
    )
}

/// `(grad_w Fbar(w, eta), d/d eta Fbar(w, eta))`.
pub fn smoothed_full_gradient<D: DeviceObjective>(
    devices: &[D],
    weights: &[f64],
    w: &[f64],
    eta: f64,
    theta: ConformityLevel,
    nu: SmoothingParam,
) -> Result<(Vec<f64>, f64)> {
    check_devices(devices, weights, w)?;
    let wv = losses(devices, weights, w)?;
    Ok(full_gradient_at(devices, &wv, w, eta, theta, nu))
}

fn full_gradient_at<D: DeviceObjective>(
    devices: &[D],
    wv: &WeightedValues,
    w: &[f64],
    eta: f64,
    theta: ConformityLevel,
    nu: SmoothingParam,
) -> (Vec<f64>, f64) {
    let coeffs = smoothed_device_coefficients(wv, theta, nu, eta);
    let mut g = vec![0.0; w.len()];
    for (dev, c) in devices.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        for (gi, di) in g.iter_mut().zip(dev.grad(w)) {
            *gi += c * di;
        }
    }
    (g, smoothed_eta_derivative(wv, theta, nu, eta))
}

/// Full-batch objectives for every device of a population.
pub fn population_objectives(pop: &Population, spec: LossSpec) -> Result<Vec<ShardObjective<'_>>> {
    pop.shards()
        .iter()
        .map(|s| ShardObjective::new(spec, s))
        .collect()
}

/// `Fbar(., eta)` for fixed `eta`. At `theta = 1` the minimizing `eta` form a
/// half-line and the subproblem is taken in the limit `eta -> -inf`, where it
/// is the weighted mean loss up to a constant; `eta: None` encodes that.
struct Subproblem<'a, D> {
    devices: &'a [D],
    weights: &'a [f64],
    eta: Option<f64>,
    theta: ConformityLevel,
    nu: SmoothingParam,
}

impl<D: DeviceObjective> Subproblem<'_, D> {
    fn value(&self, w: &[f64]) -> Result<f64> {
        let wv = losses(self.devices, self.weights, w)?;
        Ok(match self.eta {
            Some(eta) => smoothed_objective(&wv, self.theta, self.nu, eta),
            None => wv.mean(),
        })
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let wv = losses(self.devices, self.weights, w)?;
        // Below every loss by more than nu, each coefficient is alpha_k.
        let eta = self.eta.unwrap_or(f64::NEG_INFINITY);
        Ok(full_gradient_at(self.devices, &wv, w, eta, self.theta, self.nu).0)
    }

    /// Returns the new point and the number of gradient steps.
    fn solve(&self, w0: &[f64], eps: f64, solver: &WStepSolver) -> Result<(Vec<f64>, usize)> {
        let mut w = w0.to_vec();
        let mut value = self.value(&w)?;
        let mut step = solver.initial_step;
        let mut certificate = f64::INFINITY;
        for iter in 0..solver.max_iters {
            let g = self.grad(&w)?;
            let gsq = norm_sq(&g);
            certificate = gsq / (2.0 * solver.strong_convexity);
            if certificate <= eps {
                return Ok((w, iter));
            }
            // Armijo with a growing trial step so long valleys are not crawled.
            step *= 2.0;
            loop {
                let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
                let trial_value = self.value(&trial)?;
                if trial_value <= value - 0.5 * step * gsq {
                    w = trial;
                    value = trial_value;
                    break;
                }
                step *= 0.5;
                if step < 1e-300 {
                    return Err(Error::WStepNotCertified {
                        target: eps,
                        certificate,
                        iterations: iter,
                    });
                }
            }
        }
        Err(Error::WStepNotCertified {
            target: eps,
            certificate,
            iterations: solver.max_iters,
        })
    }
}

/// Runs `rounds` alternating iterations from `w0`.
#[allow(clippy::too_many_arguments)]
pub fn am_meta<D: DeviceObjective>(
    devices: &[D],
    weights: &[f64],
    theta: ConformityLevel,
    nu: SmoothingParam,
    schedule: &InexactnessSchedule,
    solver: &WStepSolver,
    rounds: usize,
    w0: Vec<f64>,
) -> Result<AmTrace> {
    schedule.validate()?;
    solver.validate()?;
    check_devices(devices, weights, &w0)?;
    // Validates and, if needed, renormalizes the weights once.
    let weights = losses(devices, weights, &w0)?.weights().to_vec();

    let mut w = w0;
    let mut iterates = Vec::with_capacity(rounds + 1);
    for t in 0..=rounds {
        let wv = losses(devices, &weights, &w)?;
        let eta = smoothed_eta_minimizers(&wv, theta, nu).midpoint();
        let (gw, geta) = full_gradient_at(devices, &wv, &w, eta, theta, nu);
        let mut record = AmIterate {
            t,
            w: w.clone(),
            eta,
            grad_norm: (norm_sq(&gw) + geta * geta).sqrt(),
            eta_derivative: geta,
            objective: smoothed_objective(&wv, theta, nu, eta),
            epsilon: None,
            w_step_iters: None,
        };
        if t < rounds {
            let eps = schedule.epsilon(t);
            let sub = Subproblem {
                devices,
                weights: &weights,
                eta: (!theta.is_vanilla()).then_some(eta),
                theta,
                nu,
            };
            let (next, iters) = sub.solve(&w, eps, solver)?;
            record.epsilon = Some(eps);
            record.w_step_iters = Some(iters);
            w = next;
        }
        iterates.push(record);
    }
    Ok(AmTrace {
        iterates,
        final_w: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::QuadraticObjective;

    fn th(t: f64) -> ConformityLevel {
        ConformityLevel::new(t).unwrap()
    }

    fn nu(n: f64) -> SmoothingParam {
        SmoothingParam::new(n).unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = InexactnessSchedule::new(0.1, 1.5).unwrap();
        assert_eq!(s.epsilon(0), 0.1);
        assert!((s.epsilon(3) - 0.1 / 8.0).abs() < 1e-15);
        assert!(InexactnessSchedule::new(0.1, 1.0).is_err());
        assert!(InexactnessSchedule::new(0.0, 2.0).is_err());
    }

    #[test]
    fn gradient_at_extreme_thresholds() {
        let devs = vec![
            QuadraticObjective::isotropic(vec![1.0, 0.0], 2.0, 0.0),
            QuadraticObjective::isotropic(vec![0.0, 3.0], 1.0, 0.5),
        ];
        let w = [0.2, 0.4];
        let (g, d) =
            smoothed_full_gradient(&devs, &[0.5, 0.5], &w, 100.0, th(0.3), nu(0.1)).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
        assert_eq!(d, 1.0);
        let (_, d) =
            smoothed_full_gradient(&devs, &[0.5, 0.5], &w, -100.0, th(0.4), nu(0.1)).unwrap();
        assert!((d - (1.0 - 1.0 / 0.4)).abs() < 1e-12);
    }

    #[test]
    fn single_device_converges_to_its_minimizer() {
        let devs = vec![QuadraticObjective::isotropic(vec![1.0, -2.0], 2.0, 0.3)];
        let trace = am_meta(
            &devs,
            &[1.0],
            th(0.5),
            nu(0.1),
            &InexactnessSchedule::new(1e-4, 2.0).unwrap(),
            &WStepSolver::default(),
            200,
            vec![0.0, 0.0],
        )
        .unwrap();
        for it in &trace.iterates {
            assert!(it.eta_derivative.abs() < 1e-10);
        }
        assert!(trace.iterates.last().unwrap().grad_norm <= 1e-10);
        assert!((trace.final_w[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn vanilla_level_finds_weighted_mean_of_centers() {
        let devs = vec![
            QuadraticObjective::gaussian_mean_estimation(vec![0.0, 0.0]),
            QuadraticObjective::gaussian_mean_estimation(vec![3.0, 0.0]),
            QuadraticObjective::gaussian_mean_estimation(vec![0.0, 6.0]),
        ];
        let trace = am_meta(
            &devs,
            &[1.0 / 3.0; 3],
            th(1.0),
            nu(1e-3),
            &InexactnessSchedule::new(1e-6, 1.5).unwrap(),
            &WStepSolver::default(),
            20,
            vec![5.0, 5.0],
        )
        .unwrap();
        assert!((trace.final_w[0] - 1.0).abs() < 1e-3);
        assert!((trace.final_w[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let devs = vec![QuadraticObjective::isotropic(vec![1.0], 1.0, 0.0)];
        let r = am_meta(
            &devs,
            &[1.0],
            th(0.5),
            nu(0.1),
            &InexactnessSchedule::default(),
            &WStepSolver::default(),
            1,
            vec![0.0, 0.0],
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }
}

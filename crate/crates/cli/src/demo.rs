//! The `gaussian-demo` command.
//!
//! Three devices hold `N(mu_k, I)` data with equal weights and the
//! squared-distance loss. At `theta = 1` the superquantile objective is the
//! mean loss, minimized at the centroid. At `theta = 2/3` it is the larger of
//! the three pairwise average losses; when the angle opposite the longest side
//! is at least 90 degrees its minimizer is the midpoint of that side.

use std::path::Path;

use anyhow::{bail, Context, Result};
use deltafl::data::gen_gaussian_mixture;
use deltafl::fed::am::population_objectives;
use deltafl::fed::{am_meta, InexactnessSchedule, WStepSolver};
use deltafl::metrics::summary_export;
use deltafl::models::{DeviceObjective, LossSpec, QuadraticObjective};
use deltafl::superquantile::{ConformityLevel, SmoothingParam};
use serde::{Deserialize, Serialize};

/// Relative tolerance for calling two side lengths equal.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    #[serde(default = "default_means")]
    pub means: Vec<Vec<f64>>,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_schedule")]
    pub inexactness: InexactnessSchedule,
    #[serde(default)]
    pub w_step: WStepSolver,
    /// Starting point; defaults to the origin shifted by `(3, -2, 0, ...)`.
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
    /// Examples per device for the rerun on sampled data; `null` skips it.
    #[serde(default = "default_samples")]
    pub n_per_device: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_means() -> Vec<Vec<f64>> {
    vec![vec![0.0, 0.0], vec![1.5, 1.0], vec![4.0, 0.0]]
}

fn default_nu() -> f64 {
    1e-3
}

fn default_rounds() -> usize {
    100
}

fn default_schedule() -> InexactnessSchedule {
    InexactnessSchedule {
        initial: 1e-3,
        exponent: 1.5,
    }
}

fn default_samples() -> Option<usize> {
    Some(10_000)
}

impl Default for DemoConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.means.len() != 3 {
            bail!("means: need exactly three means, got {}", self.means.len());
        }
        let d = self.means[0].len();
        if d == 0
            || self
                .means
                .iter()
                .any(|m| m.len() != d || m.iter().any(|v| !v.is_finite()))
        {
            bail!("means: every mean needs the same non-zero dimension and finite entries");
        }
        if let Some(w0) = &self.w0 {
            if w0.len() != d {
                bail!("w0: expected dimension {d}, got {}", w0.len());
            }
        }
        SmoothingParam::new(self.nu).context("nu")?;
        self.inexactness.validate().context("inexactness")?;
        self.w_step.validate().context("w_step")?;
        if self.n_per_device == Some(0) {
            bail!("n_per_device: must be at least 1");
        }
        Ok(())
    }

    fn start(&self) -> Vec<f64> {
        self.w0.clone().unwrap_or_else(|| {
            let mut w = vec![0.0; self.means[0].len()];
            w[0] = 3.0;
            if w.len() > 1 {
                w[1] = -2.0;
            }
            w
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Side {
    pub pair: [usize; 2],
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Geometry {
    pub sides: Vec<Side>,
    pub centroid: Vec<f64>,
    /// Sides sharing the maximal length (more than one is a tie).
    pub longest: Vec<[usize; 2]>,
    pub tie: bool,
    /// Midpoint of the longest side, when it is unique.
    pub midpoint: Option<Vec<f64>>,
    /// Whether that midpoint minimizes the `theta = 2/3` objective.
    pub midpoint_is_minimizer: bool,
}

pub fn geometry(means: &[Vec<f64>]) -> Geometry {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let sides: Vec<Side> = [[0, 1], [1, 2], [0, 2]]
        .into_iter()
        .map(|pair| Side {
            pair,
            length: dist(&means[pair[0]], &means[pair[1]]),
        })
        .collect();
    let max = sides.iter().map(|s| s.length).fold(0.0, f64::max);
    let longest: Vec<[usize; 2]> = sides
        .iter()
        .filter(|s| s.length >= max * (1.0 - TIE_TOL))
        .map(|s| s.pair)
        .collect();
    let d = means[0].len();
    let centroid = (0..d)
        .map(|i| means.iter().map(|m| m[i]).sum::<f64>() / 3.0)
        .collect();
    let tie = longest.len() > 1;
    let (midpoint, midpoint_is_minimizer) = if tie {
        (None, false)
    } else {
        let [a, b] = longest[0];
        let opposite = 3 - a - b;
        let mid: Vec<f64> = (0..d).map(|i| 0.5 * (means[a][i] + means[b][i])).collect();
        let median = dist(&mid, &means[opposite]);
        (Some(mid), median <= 0.5 * max * (1.0 + TIE_TOL))
    };
    Geometry {
        sides,
        centroid,
        longest,
        tie,
        midpoint,
        midpoint_is_minimizer,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoRun {
    pub theta: f64,
    pub target: &'static str,
    pub final_w: Vec<f64>,
    /// Absent when the target is not unique.
    pub target_point: Option<Vec<f64>>,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub geometry: Geometry,
    /// Runs on the analytic population losses.
    pub population: Vec<DemoRun>,
    /// Runs on sampled data, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled: Option<Vec<DemoRun>>,
}

pub const DEMO_THETAS: [f64; 2] = [1.0, 2.0 / 3.0];

/// Runs the demo without writing anything.
pub fn gaussian_demo(cfg: &DemoConfig) -> Result<DemoReport> {
    cfg.validate()?;
    let geo = geometry(&cfg.means);
    let weights = [1.0 / 3.0; 3];
    let population: Vec<QuadraticObjective> = cfg
        .means
        .iter()
        .map(|m| QuadraticObjective::gaussian_mean_estimation(m.clone()))
        .collect();
    let pop_runs = runs(cfg, &geo, &population, &weights)?;
    let sampled = match cfg.n_per_device {
        None => None,
        Some(n) => {
            let pop = gen_gaussian_mixture(&cfg.means, n, cfg.seed)?;
            let devices = population_objectives(&pop, LossSpec::squared_distance())?;
            Some(runs(cfg, &geo, &devices, &pop.weights())?)
        }
    };
    Ok(DemoReport {
        config: cfg.clone(),
        geometry: geo,
        population: pop_runs,
        sampled,
    })
}

fn runs<D: DeviceObjective>(
    cfg: &DemoConfig,
    geo: &Geometry,
    devices: &[D],
    weights: &[f64],
) -> Result<Vec<DemoRun>> {
    DEMO_THETAS
        .iter()
        .map(|&theta| {
            let trace = am_meta(
                devices,
                weights,
                ConformityLevel::new(theta)?,
                SmoothingParam::new(cfg.nu)?,
                &cfg.inexactness,
                &cfg.w_step,
                cfg.rounds,
                cfg.start(),
            )?;
            let (target, point) = if theta == 1.0 {
                ("centroid", Some(geo.centroid.clone()))
            } else {
                ("midpoint_of_longest_side", geo.midpoint.clone())
            };
            let distance = point.as_ref().map(|p| {
                p.iter()
                    .zip(&trace.final_w)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            });
            Ok(DemoRun {
                theta,
                target,
                final_w: trace.final_w,
                target_point: point,
                distance,
            })
        })
        .collect()
}

/// Runs the demo and writes `demo.json` into `out_dir`.
pub fn cmd_gaussian_demo(cfg: &DemoConfig, out_dir: &Path) -> Result<DemoReport> {
    let report = gaussian_demo(cfg)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    summary_export(&report, out_dir.join("demo.json"))?;
    Ok(report)
}

/// Human-readable lines for the terminal.
pub fn describe(report: &DemoReport) -> String {
    let mut lines = Vec::new();
    let g = &report.geometry;
    if g.tie {
        lines.push(format!(
            "longest side is not unique ({} sides of equal length): no single theta=2/3 target",
            g.longest.len()
        ));
    } else if !g.midpoint_is_minimizer {
        lines.push("the angle opposite the longest side is acute: its midpoint is not the theta=2/3 minimizer".into());
    }
    let sets = [
        ("population", Some(&report.population)),
        ("sampled", report.sampled.as_ref()),
    ];
    for (name, runs) in sets {
        for r in runs.into_iter().flatten() {
            let dist = r.distance.map_or("n/a".to_string(), |d| format!("{d:.3e}"));
            lines.push(format!(
                "{name:<10} theta={:.4} w={:?} target={} distance={dist}",
                r.theta, r.final_w, r.target
            ));
        }
    }
    lines.join("\n")
}

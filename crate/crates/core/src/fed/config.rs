use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LossSpec;
use crate::secure_agg::{AggregationMode, MmOptions};
use crate::superquantile::{ConformityLevel, SmoothingParam};

/// Step-decay schedule `gamma_t = initial * decay^floor(t / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRate {
    pub initial: f64,
    #[serde(default = "one_f64")]
    pub decay: f64,
    #[serde(default = "never")]
    pub period: usize,
}

fn one_f64() -> f64 {
    1.0
}

fn never() -> usize {
    usize::MAX
}

impl LearningRate {
    pub fn constant(initial: f64) -> Self {
        Self {
            initial,
            decay: 1.0,
            period: usize::MAX,
        }
    }
}

/// What a selected device runs locally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalSolver {
    /// `steps` single-example SGD updates, examples drawn with replacement.
    Sgd { steps: usize },
    /// Shuffled passes of mini-batch SGD. A batch at least as large as the
    /// shard gives one full-batch gradient step per epoch.
    Epochs { epochs: usize, batch_size: usize },
}

/// How the server obtains the loss quantile `eta_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EtaProtocol {
    /// Devices report their losses; the server sorts them.
    #[default]
    ServerDirect,
    /// Majorization-minimization over secure sums; losses stay private.
    SecureMm {
        #[serde(default = "default_mm_iters")]
        max_iters: usize,
        #[serde(default = "default_mm_tol")]
        tol: f64,
    },
}

fn default_mm_iters() -> usize {
    MmOptions::default().max_iters
}

fn default_mm_tol() -> f64 {
    MmOptions::default().tol
}

/// Where the `loss >= eta_t` filter runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterSite {
    /// The server drops devices below the quantile before local training.
    #[default]
    Server,
    /// Every sampled device receives `eta_t`; devices below it return their
    /// unchanged model with weight zero.
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub theta: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub devices_per_round: usize,
    pub local: LocalSolver,
    pub lr: LearningRate,
    pub rounds: usize,
    /// Recompute `eta` every this many rounds and reuse it in between.
    #[serde(default = "one_usize")]
    pub eta_period: usize,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossSpec,
    #[serde(default)]
    pub aggregation: AggregationMode,
    #[serde(default)]
    pub eta_protocol: EtaProtocol,
    #[serde(default)]
    pub filtering: FilterSite,
    /// Evaluate train/test metrics every this many rounds.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_nu() -> f64 {
    1e-3
}

fn one_usize() -> usize {
    1
}

fn default_eval_every() -> usize {
    10
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        ConformityLevel::new(self.theta)?;
        SmoothingParam::new(self.nu)?;
        self.loss.validate()?;
        if self.devices_per_round == 0 {
            return Err(Error::invalid("devices_per_round", "must be at least 1"));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::invalid(
                "lr.initial",
                format!("{} is not positive", self.lr.initial),
            ));
        }
        if !(self.lr.decay > 0.0 && self.lr.decay <= 1.0) {
            return Err(Error::invalid(
                "lr.decay",
                format!("{} is not in (0, 1]", self.lr.decay),
            ));
        }
        if self.lr.period == 0 {
            return Err(Error::invalid("lr.period", "must be at least 1"));
        }
        if self.eta_period == 0 {
            return Err(Error::invalid("eta_period", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every", "must be at least 1"));
        }
        match self.local {
            LocalSolver::Sgd { steps: 0 } => {
                return Err(Error::invalid("local.steps", "must be at least 1"))
            }
            LocalSolver::Epochs { epochs, batch_size } if epochs == 0 || batch_size == 0 => {
                return Err(Error::invalid(
                    "local",
                    "epochs and batch_size must be at least 1",
                ));
            }
            _ => {}
        }
        if let AggregationMode::Masked { mask_scale } = self.aggregation {
            if !(mask_scale > 0.0 && mask_scale.is_finite()) {
                return Err(Error::invalid("aggregation.mask_scale", "must be positive"));
            }
        }
        if let EtaProtocol::SecureMm { max_iters, tol } = self.eta_protocol {
            if max_iters == 0 || !(tol > 0.0) {
                return Err(Error::invalid(
                    "eta_protocol",
                    "max_iters and tol must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn conformity(&self) -> ConformityLevel {
        ConformityLevel::new(self.theta).expect("validated")
    }

    pub fn smoothing(&self) -> SmoothingParam {
        SmoothingParam::new(self.nu).expect("validated")
    }
}

/// `gamma_0 * c^floor(t / t_0)`.
pub fn lr_schedule(cfg: &FederationConfig, t: usize) -> f64 {
    let lr = &cfg.lr;
    lr.initial * lr.decay.powi((t / lr.period) as i32)
}

//! Simulated secure aggregation and quantile estimation on top of it.
//!
//! Masking follows the pairwise scheme: for every pair of clients `i < j` a
//! shared mask `m_ij` is expanded from a common seed; client `i` adds it and
//! client `j` subtracts it, so the masks cancel in the server-side sum while
//! each individual payload looks like noise. There is no cryptography here,
//! only the data flow, and arithmetic is plain `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_key, stream, tag};
use crate::superquantile::{ConformityLevel, WeightedValues};

/// Default mask half-width for masked aggregation.
pub const DEFAULT_MASK_SCALE: f64 = 1e3;

/// `sum_k w_k v_k / sum_k w_k`.
pub fn plain_weighted_sum(contributions: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
    let dim = check_contributions(contributions)?;
    let total: f64 = contributions.iter().map(|c| c.1).sum();
    let mut out = vec![0.0; dim];
    for (v, w) in contributions {
        if *w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

fn check_contributions(contributions: &[(Vec<f64>, f64)]) -> Result<usize> {
    let dim = contributions
        .first()
        .ok_or(Error::Empty("contributions"))?
        .0
        .len();
    for (v, w) in contributions {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::invalid(
                "weight",
                format!("{w} is negative or non-finite"),
            ));
        }
    }
    if contributions.iter().all(|c| c.1 == 0.0) {
        return Err(Error::invalid(
            "weight",
            "all contribution weights are zero",
        ));
    }
    Ok(dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Client input with pairwise masks applied.
    MaskedInput,
    /// Client input sent in the clear (single-client degenerate case).
    ClearInput,
    /// Aggregate broadcast by the server.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: String,
    pub receiver: String,
    pub kind: PayloadKind,
    pub dim: usize,
}

/// Everything the server saw during one aggregation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationTranscript {
    pub messages: Vec<Message>,
    /// Payloads received by the server, in client order.
    pub server_visible: Vec<Vec<f64>>,
    /// Set when fewer than two clients took part, so nothing could be masked.
    pub degenerate: bool,
}

impl AggregationTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("transcripts always serialize")
    }
}

fn client_name(i: usize) -> String {
    format!("client-{i}")
}

fn pair_mask(seed: u64, i: usize, j: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = stream(seed, &[tag::MASK, i as u64, j as u64]);
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Secure sum of the clients' vectors with pairwise cancelling masks.
pub fn masked_sum(
    inputs: &[Vec<f64>],
    pairwise_seed: u64,
    mask_scale: f64,
) -> Result<(Vec<f64>, AggregationTranscript)> {
    let dim = inputs.first().ok_or(Error::Empty("contributions"))?.len();
    if let Some(v) = inputs.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if !(mask_scale > 0.0 && mask_scale.is_finite()) {
        return Err(Error::invalid(
            "mask_scale",
            format!("{mask_scale} is not positive"),
        ));
    }
    let n = inputs.len();
    let mut transcript = AggregationTranscript {
        degenerate: n < 2,
        ..Default::default()
    };
    let mut payloads: Vec<Vec<f64>> = inputs.to_vec();
    if n >= 2 {
        for i in 0..n {
            for j in i + 1..n {
                let m = pair_mask(pairwise_seed, i, j, dim, mask_scale);
                for d in 0..dim {
                    payloads[i][d] += m[d];
                    payloads[j][d] -= m[d];
                }
            }
        }
    }
    let kind = if n >= 2 {
        PayloadKind::MaskedInput
    } else {
        PayloadKind::ClearInput
    };
    let mut sum = vec![0.0; dim];
    for (i, p) in payloads.into_iter().enumerate() {
        transcript.messages.push(Message {
            sender: client_name(i),
            receiver: "server".into(),
            kind,
            dim,
        });
        for (s, x) in sum.iter_mut().zip(&p) {
            *s += x;
        }
        transcript.server_visible.push(p);
    }
    for i in 0..n {
        transcript.messages.push(Message {
            sender: "server".into(),
            receiver: client_name(i),
            kind: PayloadKind::Aggregate,
            dim,
        });
    }
    Ok((sum, transcript))
}

/// Weighted average computed through [`masked_sum`].
///
/// Each client sends `(w_k v_k, w_k)` masked, so the server learns only the
/// two totals. Zero-weight clients still send a (masked) payload.
pub fn masked_weighted_sum(
    contributions: &[(Vec<f64>, f64)],
    pairwise_seed: u64,
    mask_scale: f64,
) -> Result<(Vec<f64>, AggregationTranscript)> {
    check_contributions(contributions)?;
    let inputs: Vec<Vec<f64>> = contributions
        .iter()
        .map(|(v, w)| v.iter().map(|x| w * x).chain(std::iter::once(*w)).collect())
        .collect();
    let (mut sum, transcript) = masked_sum(&inputs, pairwise_seed, mask_scale)?;
    let total = sum.pop().expect("weight slot");
    Ok((sum.into_iter().map(|s| s / total).collect(), transcript))
}

/// Result of checking a transcript against the raw client inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// `(payload index, raw input index)` pairs that matched within tolerance.
    pub leaks: Vec<(usize, usize)>,
    pub payloads_checked: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.leaks.is_empty()
    }
}

/// Flags any server-visible payload equal (within `tol`, max-norm) to a raw input.
pub fn audit_transcript(
    transcript: &AggregationTranscript,
    raw_inputs: &[Vec<f64>],
    tol: f64,
) -> AuditReport {
    let mut leaks = Vec::new();
    for (p, payload) in transcript.server_visible.iter().enumerate() {
        for (r, raw) in raw_inputs.iter().enumerate() {
            if payload.len() == raw.len()
                && payload.iter().zip(raw).all(|(a, b)| (a - b).abs() <= tol)
            {
                leaks.push((p, r));
            }
        }
    }
    AuditReport {
        leaks,
        payloads_checked: transcript.server_visible.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Plain,
    Masked {
        #[serde(default = "default_mask_scale")]
        mask_scale: f64,
    },
}

fn default_mask_scale() -> f64 {
    DEFAULT_MASK_SCALE
}

/// Stateful aggregation endpoint for one protocol run.
///
/// Every call draws fresh pairwise masks keyed by `(seed, call index)` and,
/// in masked mode, keeps the transcript for auditing.
#[derive(Debug, Clone)]
pub struct Aggregator {
    mode: AggregationMode,
    seed: u64,
    calls: u64,
    transcripts: Vec<AggregationTranscript>,
}

impl Aggregator {
    pub fn new(mode: AggregationMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            calls: 0,
            transcripts: Vec::new(),
        }
    }

    pub fn plain() -> Self {
        Self::new(AggregationMode::Plain, 0)
    }

    pub fn masked(seed: u64, mask_scale: f64) -> Self {
        Self::new(AggregationMode::Masked { mask_scale }, seed)
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    /// Number of aggregation calls made so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn transcripts(&self) -> &[AggregationTranscript] {
        &self.transcripts
    }

    fn next_seed(&mut self) -> u64 {
        let s = derive_key(self.seed, &[tag::MASK, self.calls]);
        self.calls += 1;
        s
    }

    /// Sum of the clients' vectors.
    pub fn sum(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let seed = self.next_seed();
        match self.mode {
            AggregationMode::Plain => {
                let dim = inputs.first().ok_or(Error::Empty("contributions"))?.len();
                let mut out = vec![0.0; dim];
                for v in inputs {
                    if v.len() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: v.len(),
                        });
                    }
                    for (o, x) in out.iter_mut().zip(v) {
                        *o += x;
                    }
                }
                Ok(out)
            }
            AggregationMode::Masked { mask_scale } => {
                let (sum, t) = masked_sum(inputs, seed, mask_scale)?;
                self.transcripts.push(t);
                Ok(sum)
            }
        }
    }

    /// Weighted average of the clients' vectors.
    pub fn weighted_average(&mut self, contributions: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
        let seed = self.next_seed();
        match self.mode {
            AggregationMode::Plain => plain_weighted_sum(contributions),
            AggregationMode::Masked { mask_scale } => {
                let (avg, t) = masked_weighted_sum(contributions, seed, mask_scale)?;
                self.transcripts.push(t);
                Ok(avg)
            }
        }
    }
}

/// Weighted values and a quantile level `tau` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinballSpec {
    pub tau: f64,
    pub data: WeightedValues,
}

impl PinballSpec {
    pub fn new(tau: f64, data: WeightedValues) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid("tau", format!("{tau} is not in [0, 1]")));
        }
        Ok(Self { tau, data })
    }
}

fn check_loss(tau: f64, rho: f64) -> f64 {
    if rho >= 0.0 {
        tau * rho
    } else {
        -(1.0 - tau) * rho
    }
}

/// `H_tau(mu) = sum_k alpha_k h_tau(x_k - mu)`; minimized exactly by the tau-quantiles.
pub fn pinball_loss(spec: &PinballSpec, mu: f64) -> f64 {
    spec.data
        .values()
        .iter()
        .zip(spec.data.weights())
        .map(|(x, a)| a * check_loss(spec.tau, x - mu))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmOptions {
    pub max_iters: usize,
    /// Stop once `|mu_{t+1} - mu_t| <= tol`.
    pub tol: f64,
    /// Starting point; defaults to the weighted mean nudged off the data.
    #[serde(default)]
    pub init: Option<f64>,
}

impl Default for MmOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tol: 1e-12,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmOutcome {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `mu_0, mu_1, ...` including the returned value.
    pub trajectory: Vec<f64>,
}

/// An iterate closer than this to a data point is treated as coinciding with it.
const COINCIDE_TOL: f64 = 1e-12;

/// Majorization-minimization for the tau-quantile using only secure sums.
///
/// With `beta_k = alpha_k / |x_k - mu_t|`, the next iterate is
/// `(sum_k beta_k x_k + (2 tau - 1)) / sum_k beta_k`; numerator and
/// denominator are two separate aggregator calls. If `mu_t` coincides with a
/// data point the iteration stops there. Each step cannot increase the
/// pinball loss.
pub fn mm_quantile(
    spec: &PinballSpec,
    opts: &MmOptions,
    aggregator: &mut Aggregator,
) -> Result<MmOutcome> {
    if opts.max_iters == 0 {
        return Err(Error::invalid("max_iters", "must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let (xs, alphas) = (spec.data.values(), spec.data.weights());
    let (lo, hi) = (spec.data.min(), spec.data.max());
    let mut mu = opts
        .init
        .unwrap_or_else(|| spec.data.mean() + 1e-9 * (hi - lo));
    let mut trajectory = vec![mu];
    if hi == lo {
        return Ok(MmOutcome {
            value: lo,
            iterations: 0,
            converged: true,
            trajectory: vec![lo],
        });
    }
    let shift = 2.0 * spec.tau - 1.0;

    for it in 0..opts.max_iters {
        if let Some(k) = xs.iter().position(|x| (x - mu).abs() <= COINCIDE_TOL) {
            if xs[k] != mu {
                trajectory.push(xs[k]);
            }
            return Ok(MmOutcome {
                value: xs[k],
                iterations: it,
                converged: true,
                trajectory,
            });
        }
        let betas: Vec<f64> = xs
            .iter()
            .zip(alphas)
            .map(|(x, a)| a / (x - mu).abs().max(COINCIDE_TOL))
            .collect();
        let numer: Vec<Vec<f64>> = betas.iter().zip(xs).map(|(b, x)| vec![b * x]).collect();
        let denom: Vec<Vec<f64>> = betas.iter().map(|b| vec![*b]).collect();
        let num = aggregator.sum(&numer)?[0];
        let den = aggregator.sum(&denom)?[0];
        let next = (num + shift) / den;
        trajectory.push(next);
        let step = (next - mu).abs();
        mu = next;
        if step <= opts.tol {
            return Ok(MmOutcome {
                value: mu,
                iterations: it + 1,
                converged: true,
                trajectory,
            });
        }
    }
    Ok(MmOutcome {
        value: mu,
        iterations: opts.max_iters,
        converged: false,
        trajectory,
    })
}

/// The `(1 - theta)`-quantile of the sampled losses via [`mm_quantile`].
///
/// Weights are renormalized over the sample. At `theta = 1` the 0-quantile is
/// the smallest loss, returned directly.
pub fn secure_quantile_for_round(
    losses: &[f64],
    weights: &[f64],
    theta: ConformityLevel,
    opts: &MmOptions,
    aggregator: &mut Aggregator,
) -> Result<MmOutcome> {
    let data = WeightedValues::normalized(losses.to_vec(), weights.to_vec())?;
    if theta.is_vanilla() {
        let m = data.min();
        return Ok(MmOutcome {
            value: m,
            iterations: 0,
            converged: true,
            trajectory: vec![m],
        });
    }
    let spec = PinballSpec::new(1.0 - theta.get(), data)?;
    mm_quantile(&spec, opts, aggregator)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_examples() {
        assert_eq!(
            plain_weighted_sum(&[(vec![1.0, 2.0], 0.3)]).unwrap(),
            vec![1.0, 2.0]
        );
        let same = plain_weighted_sum(&[(vec![4.0, -1.0], 0.1), (vec![4.0, -1.0], 5.0)]).unwrap();
        assert!((same[0] - 4.0).abs() < 1e-15 && (same[1] + 1.0).abs() < 1e-15);
        let v = plain_weighted_sum(&[(vec![1.0, 0.0], 1.0), (vec![0.0, 1.0], 3.0)]).unwrap();
        assert_eq!(v, vec![0.25, 0.75]);
    }

    #[test]
    fn plain_errors() {
        assert!(matches!(
            plain_weighted_sum(&[(vec![1.0], 1.0), (vec![1.0, 2.0], 1.0)]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(plain_weighted_sum(&[(vec![1.0], 0.0), (vec![2.0], 0.0)]).is_err());
        assert!(plain_weighted_sum(&[]).is_err());
        assert!(plain_weighted_sum(&[(vec![1.0], -1.0)]).is_err());
    }

    #[test]
    fn masked_matches_plain_and_hides_inputs() {
        let c = vec![
            (vec![1.0, 2.0, 3.0], 0.2),
            (vec![-1.0, 0.5, 0.0], 0.5),
            (vec![2.0, 2.0, 2.0], 0.3),
        ];
        let plain = plain_weighted_sum(&c).unwrap();
        let (masked, t) = masked_weighted_sum(&c, 99, 1e3).unwrap();
        for (a, b) in masked.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!t.degenerate);
        assert_eq!(t.server_visible.len(), 3);
        let raw: Vec<Vec<f64>> = c
            .iter()
            .map(|(v, w)| v.iter().map(|x| w * x).chain([*w]).collect())
            .collect();
        assert!(audit_transcript(&t, &raw, 1e-9).is_clean());
        assert!(t.to_json().contains("masked_input"));
    }

    #[test]
    fn single_client_is_flagged() {
        let (v, t) = masked_weighted_sum(&[(vec![3.0], 2.0)], 1, 10.0).unwrap();
        assert_eq!(v, vec![3.0]);
        assert!(t.degenerate);
        assert_eq!(t.messages[0].kind, PayloadKind::ClearInput);
    }

    #[test]
    fn aggregator_uses_fresh_masks_per_call() {
        let mut agg = Aggregator::masked(5, 100.0);
        let inputs = vec![vec![1.0], vec![2.0]];
        agg.sum(&inputs).unwrap();
        agg.sum(&inputs).unwrap();
        let t = agg.transcripts();
        assert_eq!(t.len(), 2);
        assert_ne!(t[0].server_visible, t[1].server_visible);
        assert_eq!(agg.calls(), 2);
    }

    #[test]
    fn pinball_examples() {
        let one = PinballSpec::new(0.3, WeightedValues::uniform(vec![2.0]).unwrap()).unwrap();
        assert_eq!(pinball_loss(&one, 2.0), 0.0);
        let s =
            PinballSpec::new(0.5, WeightedValues::uniform(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert!((pinball_loss(&s, 2.0) - 1.0 / 3.0).abs() < 1e-15);
        // tau = 1/2 is half the weighted mean absolute deviation.
        let mad: f64 = [1.0f64, 2.0, 3.0]
            .iter()
            .map(|x| (x - 1.7).abs())
            .sum::<f64>()
            / 3.0;
        assert!((pinball_loss(&s, 1.7) - mad / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mm_stops_at_a_data_point_start() {
        let s =
            PinballSpec::new(0.8, WeightedValues::uniform(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let opts = MmOptions {
            init: Some(2.0),
            ..Default::default()
        };
        let out = mm_quantile(&s, &opts, &mut Aggregator::plain()).unwrap();
        assert_eq!(out.value, 2.0);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn mm_median_of_three() {
        let s =
            PinballSpec::new(0.5, WeightedValues::uniform(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let out = mm_quantile(&s, &MmOptions::default(), &mut Aggregator::plain()).unwrap();
        assert!(out.converged);
        assert!((out.value - 2.0).abs() <= 1e-6);
    }

    #[test]
    fn mm_uses_two_aggregations_per_step() {
        let s = PinballSpec::new(
            0.3,
            WeightedValues::uniform(vec![1.0, 5.0, 2.0, 8.0]).unwrap(),
        )
        .unwrap();
        let mut agg = Aggregator::plain();
        let out = mm_quantile(&s, &MmOptions::default(), &mut agg).unwrap();
        let steps = out.trajectory.len() as u64 - 1;
        // the final snap onto a data point costs no aggregation
        assert!(agg.calls() == 2 * steps || agg.calls() == 2 * (steps - 1));
    }

    #[test]
    fn secure_round_quantile_edge_cases() {
        let mut agg = Aggregator::masked(3, 1e3);
        let opts = MmOptions::default();
        let v = secure_quantile_for_round(
            &[3.0, 1.0, 2.0],
            &[1.0, 1.0, 1.0],
            ConformityLevel::vanilla(),
            &opts,
            &mut agg,
        )
        .unwrap();
        assert_eq!(v.value, 1.0);
        let theta = ConformityLevel::new(0.4).unwrap();
        let v = secure_quantile_for_round(&[4.5], &[0.2], theta, &opts, &mut agg).unwrap();
        assert_eq!(v.value, 4.5);
    }
}

//! Brute-force reference computations for tests.
//!
//! Nothing here shares code with `deltafl-core`: every routine is a direct
//! enumeration, grid scan, or finite difference so it can serve as an
//! independent check on the closed-form implementations.

/// Result of a uniform grid scan.
#[derive(Debug, Clone, Copy)]
pub struct GridMin {
    /// First grid point attaining the minimum (within `flat_tol`).
    pub first: f64,
    /// Last grid point attaining the minimum (within `flat_tol`).
    pub last: f64,
    pub value: f64,
}

/// Scans `f` on `lo, lo + step, ..., hi` and reports the minimum value
/// together with the extent of the grid points within `flat_tol` of it.
pub fn grid_minimize(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    step: f64,
    flat_tol: f64,
) -> GridMin {
    assert!(hi > lo && step > 0.0);
    let n = ((hi - lo) / step).round() as usize;
    let points: Vec<(f64, f64)> = (0..=n)
        .map(|i| {
            let x = lo + i as f64 * step;
            (x, f(x))
        })
        .collect();
    let value = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let near: Vec<f64> = points
        .iter()
        .filter(|p| p.1 <= value + flat_tol)
        .map(|p| p.0)
        .collect();
    GridMin {
        first: near[0],
        last: *near.last().unwrap(),
        value,
    }
}

/// `eta + (1/theta) * sum_k alpha_k (x_k - eta)_+`, written out longhand.
pub fn dual_objective(values: &[f64], weights: &[f64], theta: f64, eta: f64) -> f64 {
    let mut tail = 0.0;
    for k in 0..values.len() {
        let r = values[k] - eta;
        if r > 0.0 {
            tail += weights[k] * r;
        }
    }
    eta + tail / theta
}

/// Enumerates the vertices of `{pi in simplex : pi_k <= alpha_k / theta}`.
///
/// A vertex has every coordinate at a bound (0 or the cap) except at most one.
/// Enumeration is `3^N`, so this is only meant for small `N`.
pub fn capped_simplex_vertices(weights: &[f64], theta: f64) -> Vec<Vec<f64>> {
    let n = weights.len();
    assert!(n <= 10, "vertex enumeration is exponential");
    let caps: Vec<f64> = weights.iter().map(|a| a / theta).collect();
    let mut out = Vec::new();
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut state = vec![0u8; n];
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&k| state[k] == 2).collect();
        if free.len() > 1 {
            continue;
        }
        let mut pi: Vec<f64> = (0..n)
            .map(|k| if state[k] == 1 { caps[k] } else { 0.0 })
            .collect();
        let fixed: f64 = pi.iter().sum();
        match free.first() {
            Some(&j) => {
                let v = 1.0 - fixed;
                if v < -1e-12 || v > caps[j] + 1e-12 {
                    continue;
                }
                pi[j] = v.clamp(0.0, caps[j]);
            }
            None => {
                if (fixed - 1.0).abs() > 1e-12 {
                    continue;
                }
            }
        }
        let seen = out
            .iter()
            .any(|q: &Vec<f64>| q.iter().zip(&pi).all(|(a, b)| (a - b).abs() <= 1e-12));
        if !seen {
            out.push(pi);
        }
    }
    out
}

/// `max_{pi in P_theta} sum_k pi_k x_k` by vertex enumeration.
pub fn worst_case_mixture_value(values: &[f64], weights: &[f64], theta: f64) -> f64 {
    capped_simplex_vertices(weights, theta)
        .iter()
        .map(|pi| pi.iter().zip(values).map(|(p, x)| p * x).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central second difference of a scalar function.
pub fn second_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Relative error `|a - b| / max(1, |b|)` over vectors, using the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1.0)
}

/// Small deterministic generator for test fixtures (SplitMix64).
#[derive(Debug, Clone)]
pub struct FixtureRng(u64);

impl FixtureRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Box-Muller standard normal.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Positive weights summing to one.
    pub fn simplex(&mut self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| self.range(0.05, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / s).collect()
    }
}

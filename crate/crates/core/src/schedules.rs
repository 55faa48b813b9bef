//! Hyperparameter schedules: explicit per-step sequences, the inverse time
//! decay family, and the closed-form greedy and univariate-optimal rules.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::dynamics::{rollout, step_in_place, MomentState, RolloutResult};
use crate::error::{check_dim, NqmError, Result};
use crate::quad_model::QuadraticProblem;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperStep {
    pub alpha: f64,
    pub mu: f64,
}

impl HyperStep {
    pub fn new(alpha: f64, mu: f64) -> Self {
        HyperStep { alpha, mu }
    }
}

/// A sequence of `(α, μ)` pairs, one per optimization step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    steps: Vec<HyperStep>,
}

impl Schedule {
    pub fn new(steps: Vec<HyperStep>) -> Result<Self> {
        for (t, s) in steps.iter().enumerate() {
            if !(s.alpha >= 0.0 && s.alpha.is_finite()) {
                return Err(NqmError::arg(format!("alpha[{t}] = {} must be finite and >= 0", s.alpha)));
            }
            if !s.mu.is_finite() {
                return Err(NqmError::arg(format!("mu[{t}] = {} must be finite", s.mu)));
            }
        }
        Ok(Schedule { steps })
    }

    pub fn empty() -> Self {
        Schedule::default()
    }

    pub fn constant(alpha: f64, mu: f64, len: usize) -> Self {
        Schedule::new(vec![HyperStep::new(alpha, mu); len]).expect("constant schedule is valid")
    }

    pub fn from_pairs(alphas: &[f64], mus: &[f64]) -> Result<Self> {
        check_dim(alphas.len(), mus.len())?;
        Schedule::new(alphas.iter().zip(mus).map(|(&a, &m)| HyperStep::new(a, m)).collect())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[HyperStep] {
        &self.steps
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.alpha).collect()
    }

    pub fn mus(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mu).collect()
    }

    /// Appends the steps of `other`.
    pub fn extended(&self, other: &Schedule) -> Schedule {
        let mut steps = self.steps.clone();
        steps.extend_from_slice(&other.steps);
        Schedule { steps }
    }

    /// CSV with header `t,alpha,mu`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,alpha,mu")?;
        for (t, s) in self.steps.iter().enumerate() {
            writeln!(out, "{t},{},{}", s.alpha, s.mu)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, origin: &Path) -> Result<Schedule> {
        let parse_err = |line: usize, msg: String| NqmError::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut steps = Vec::new();
        let mut saw_header = false;
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| NqmError::io(origin, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                let cols: Vec<_> = line.split(',').map(str::trim).collect();
                if cols != ["t", "alpha", "mu"] {
                    return Err(parse_err(n + 1, format!("expected header 't,alpha,mu', got '{line}'")));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<_> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(n + 1, format!("expected 3 fields, got {}", fields.len())));
            }
            let t: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(n + 1, format!("bad step index: {e}")))?;
            if t != steps.len() {
                return Err(parse_err(n + 1, format!("step {t} out of order, expected {}", steps.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|e| parse_err(n + 1, format!("bad number '{s}': {e}")))
            };
            steps.push(HyperStep::new(num(fields[1])?, num(fields[2])?));
        }
        if !saw_header {
            return Err(parse_err(1, "missing header".into()));
        }
        Schedule::new(steps).map_err(|e| parse_err(0, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Schedule> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| NqmError::io(path, e))?;
        Schedule::read_csv(std::io::BufReader::new(file), path)
    }
}

/// `α_t = α₀ / (1 + t/K)^β` with a fixed momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseTimeDecay {
    pub alpha0: f64,
    pub beta: f64,
    pub time_constant: f64,
    pub mu: f64,
}

impl InverseTimeDecay {
    pub const DEFAULT_MU: f64 = 0.9;
    pub const DEFAULT_TIME_CONSTANT: f64 = 5000.0;

    pub fn new(alpha0: f64, beta: f64) -> Self {
        InverseTimeDecay {
            alpha0,
            beta,
            time_constant: Self::DEFAULT_TIME_CONSTANT,
            mu: Self::DEFAULT_MU,
        }
    }

    pub fn eval(&self, t: usize) -> f64 {
        eval_inverse_time_decay(self, t)
    }

    pub fn materialize(&self, len: usize) -> Schedule {
        materialize(self, len)
    }
}

pub fn eval_inverse_time_decay(p: &InverseTimeDecay, t: usize) -> f64 {
    p.alpha0 / (1.0 + t as f64 / p.time_constant).powf(p.beta)
}

pub fn materialize(p: &InverseTimeDecay, len: usize) -> Schedule {
    Schedule {
        steps: (0..len).map(|t| HyperStep::new(p.eval(t), p.mu)).collect(),
    }
}

/// Sums that determine the one-step-ahead loss as a quadratic in `(α, μ)`.
#[derive(Debug, Clone, Copy, Default)]
struct GreedySums {
    /// Σ h³ (A(θ) + σ²)
    p: f64,
    /// Σ h² A(θ)
    q: f64,
    /// Σ h² E[θv]
    r: f64,
    /// Σ h A(v)
    s: f64,
    /// Σ h E[θv]
    u: f64,
}

fn greedy_sums(state: &MomentState, problem: &QuadraticProblem) -> GreedySums {
    let (h, s2) = (problem.h(), problem.sigma2());
    let mut g = GreedySums::default();
    for i in 0..state.dim() {
        let m = state.get(i);
        let (hi, h2) = (h[i], h[i] * h[i]);
        let (at, av, x) = (m.a_theta(), m.a_v(), m.e_theta_v());
        g.p += h2 * hi * (at + s2[i]);
        g.q += h2 * at;
        g.r += h2 * x;
        g.s += hi * av;
        g.u += hi * x;
    }
    g
}

/// Learning rate and momentum minimizing the expected loss one step ahead.
///
/// With no velocity statistics (`Σ hᵢ A(vᵢ) = 0`), momentum has no effect and
/// `μ* = 0`. If the problem is noiseless and the stationarity system is
/// singular, the minimizer is a line; the point with `μ = 0` is returned.
pub fn greedy_step(state: &MomentState, problem: &QuadraticProblem) -> Result<(f64, f64)> {
    check_dim(problem.dim(), state.dim())?;
    let g = greedy_sums(state, problem);
    if ![g.p, g.q, g.r, g.s, g.u].iter().all(|x| x.is_finite()) {
        return Err(NqmError::Degenerate("non-finite moment sums".into()));
    }
    if g.s == 0.0 {
        if g.p <= 0.0 {
            return Err(NqmError::Degenerate(
                "learning-rate denominator is zero: noiseless problem already at its optimum".into(),
            ));
        }
        return Ok((g.q / g.p, 0.0));
    }
    if g.p == 0.0 {
        // α has no effect on the next loss; ties go to the smaller step
        return Ok((0.0, -g.u / g.s));
    }
    let ps = g.p * g.s;
    let den = ps - g.r * g.r;
    if den > 1e-12 * ps {
        let alpha = (g.q * g.s - g.r * g.u) / den;
        let mu = (alpha * g.r - g.u) / g.s;
        Ok((alpha, mu))
    } else if den >= -1e-12 * ps && problem.is_deterministic() {
        Ok((g.q / g.p, 0.0))
    } else {
        Err(NqmError::Degenerate(format!(
            "learning-rate denominator {den:e} is not positive"
        )))
    }
}

fn at_exact_optimum(state: &MomentState) -> bool {
    (0..state.dim()).all(|i| {
        let m = state.get(i);
        m.a_theta() == 0.0 && m.a_v() == 0.0
    })
}

/// Applies [`greedy_step`] and the moment recurrence `len` times.
pub fn greedy_schedule(
    problem: &QuadraticProblem,
    init: &MomentState,
    len: usize,
) -> Result<(Schedule, RolloutResult)> {
    if len == 0 {
        return Err(NqmError::arg("greedy schedule needs at least one step"));
    }
    check_dim(problem.dim(), init.dim())?;
    let mut state = init.clone();
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let (alpha, mu) = match greedy_step(&state, problem) {
            Ok(step) => step,
            // a noiseless problem solved exactly stays put
            Err(NqmError::Degenerate(_)) if at_exact_optimum(&state) => (0.0, 0.0),
            Err(NqmError::Degenerate(msg)) => {
                return Err(NqmError::Degenerate(format!("step {t}: {msg}")))
            }
            Err(e) => return Err(e),
        };
        let alpha = alpha.max(0.0);
        step_in_place(&mut state, alpha, mu, problem).map_err(|e| e.at_step(t))?;
        steps.push(HyperStep::new(alpha, mu));
    }
    let schedule = Schedule::new(steps)?;
    let result = rollout(problem, init, &schedule, None)?;
    Ok((schedule, result))
}

/// Optimal SGD learning rate for a univariate problem with second moment `a`:
/// `A / (h (A + σ²))`. Zero when already at the optimum of a noiseless problem.
pub fn univariate_optimal_alpha(a: f64, h: f64, sigma2: f64) -> f64 {
    let den = a + sigma2;
    if den <= 0.0 {
        0.0
    } else {
        a / (h * den)
    }
}

/// Second moment after `k` optimal SGD steps from `a0`: `A₀σ² / (kA₀ + σ²)`.
pub fn univariate_a_min(a0: f64, sigma2: f64, k: usize) -> f64 {
    let den = k as f64 * a0 + sigma2;
    if den <= 0.0 {
        0.0
    } else {
        a0 * sigma2 / den
    }
}

/// Minimal expected loss after `k ≥ 1` optimally tuned SGD steps on a
/// univariate problem, `½ h (A_k + σ²)`.
pub fn univariate_lmin(a0: f64, h: f64, sigma2: f64, k: usize) -> f64 {
    0.5 * h * (univariate_a_min(a0, sigma2, k) + sigma2)
}

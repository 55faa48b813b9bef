//! Experiment drivers shared by the commands and the acceptance suite.

use nqm::dynamics::{rollout_states, top_bottom_groups, IndexGroup};
use nqm::meta_opt::{optimize_fixed, optimize_schedule, MetaConfig, Parameterization};
use nqm::{rollout, greedy_schedule, MomentState, NqmError, QuadraticProblem, RolloutResult, Schedule};

#[derive(Debug, Clone)]
pub struct ScheduleRun {
    pub name: &'static str,
    pub schedule: Schedule,
    pub result: RolloutResult,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// Greedy, optimized, fixed, in that order.
    pub runs: [ScheduleRun; 3],
    pub noise_floor: f64,
    pub optimized_trace: Vec<f64>,
    pub fixed_trace: Vec<f64>,
}

impl Comparison {
    pub fn run(&self, name: &str) -> &ScheduleRun {
        self.runs.iter().find(|r| r.name == name).expect("known schedule name")
    }

    pub fn final_loss(&self, name: &str) -> f64 {
        self.run(name).result.final_loss()
    }

    /// Final loss above the irreducible noise floor.
    pub fn excess(&self, name: &str) -> f64 {
        self.final_loss(name) - self.noise_floor
    }
}

/// Greedy, per-step optimized and best fixed `(α, μ)` schedules over the same
/// horizon, each rolled out with top/bottom curvature groups of size `k`.
pub fn compare_schedules(
    problem: &QuadraticProblem,
    init: &MomentState,
    meta: &MetaConfig,
    k: usize,
) -> nqm::Result<Comparison> {
    let groups = top_bottom_groups(problem, k)?;
    let t = meta.horizon;
    let (greedy, _) = greedy_schedule(problem, init, t)?;
    let opt = optimize_schedule(
        problem,
        init,
        &MetaConfig {
            parameterization: Parameterization::PerStep,
            ..meta.clone()
        },
    )?;
    let fixed = optimize_fixed(
        problem,
        init,
        &MetaConfig {
            parameterization: Parameterization::Fixed,
            ..meta.clone()
        },
    )?;
    let fixed_schedule = Schedule::constant(fixed.params.alpha, fixed.params.mu, t);
    let run = |name, schedule: Schedule, groups: &[IndexGroup]| -> nqm::Result<ScheduleRun> {
        let result = rollout(problem, init, &schedule, Some(groups))?;
        Ok(ScheduleRun { name, schedule, result })
    };
    Ok(Comparison {
        runs: [
            run("greedy", greedy, &groups)?,
            run("optimized", opt.params, &groups)?,
            run("fixed", fixed_schedule, &groups)?,
        ],
        noise_floor: problem.noise_floor(),
        optimized_trace: opt.trace,
        fixed_trace: fixed.trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub k: usize,
    /// Expected loss after `k` steps; infinite if the rollout diverged.
    pub plain: f64,
    /// The same after a further exponentially decaying tail.
    pub decayed: f64,
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> nqm::Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && n >= 1) || (n == 1 && lo != hi) {
        return Err(NqmError::Argument(format!("bad log grid [{lo}, {hi}] with {n} points")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|j| match j {
            0 => lo,
            _ if j + 1 == n => hi,
            _ => (a + (b - a) * j as f64 / (n - 1) as f64).exp(),
        })
        .collect())
}

/// Tail learning rates decaying geometrically from `alpha` to `factor · alpha`.
pub fn decay_tail(alpha: f64, mu: f64, steps: usize, factor: f64) -> Schedule {
    let steps: Vec<_> = (0..steps)
        .map(|s| {
            let frac = if steps > 1 { s as f64 / (steps - 1) as f64 } else { 1.0 };
            nqm::HyperStep::new(alpha * factor.powf(frac), mu)
        })
        .collect();
    Schedule::new(steps).expect("finite tail")
}

fn finite_or_inf(r: nqm::Result<f64>) -> nqm::Result<f64> {
    match r {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(_) | Err(NqmError::Instability { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Loss after `k` constant-`α` steps, and after those steps plus a decay
/// tail, for every `α` and `k`. Rows are ordered by `k`, then `α`.
pub fn horizon_sweep(
    problem: &QuadraticProblem,
    init: &MomentState,
    alphas: &[f64],
    horizons: &[usize],
    mu: f64,
    tail_steps: usize,
    tail_factor: f64,
) -> nqm::Result<Vec<SweepRow>> {
    let k_max = horizons.iter().copied().max().unwrap_or(0);
    let mut by_alpha = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let tail = decay_tail(alpha, mu, tail_steps, tail_factor);
        let states = match rollout_states(problem, init, &Schedule::constant(alpha, mu, k_max)) {
            Ok(s) => Some(s),
            Err(NqmError::Instability { .. }) => None,
            Err(e) => return Err(e),
        };
        let mut cols = Vec::with_capacity(horizons.len());
        for &k in horizons {
            let pair = match &states {
                Some(s) => (
                    finite_or_inf(problem.expected_loss(&s[k]))?,
                    finite_or_inf(nqm::meta_loss(problem, &s[k], &tail))?,
                ),
                None => (f64::INFINITY, f64::INFINITY),
            };
            cols.push(pair);
        }
        by_alpha.push(cols);
    }
    let mut rows = Vec::with_capacity(alphas.len() * horizons.len());
    for (j, &k) in horizons.iter().enumerate() {
        for (i, &alpha) in alphas.iter().enumerate() {
            let (plain, decayed) = by_alpha[i][j];
            rows.push(SweepRow { alpha, k, plain, decayed });
        }
    }
    Ok(rows)
}

/// Per horizon: the `α` minimizing the plain and the decay-extended loss.
pub fn sweep_argmins(rows: &[SweepRow]) -> Vec<(usize, f64, f64)> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let at_k = rows.iter().filter(|r| r.k == k);
            let best = |f: fn(&SweepRow) -> f64| {
                at_k.clone()
                    .min_by(|a, b| f(a).total_cmp(&f(b)))
                    .map(|r| r.alpha)
                    .unwrap_or(f64::NAN)
            };
            (k, best(|r| r.plain), best(|r| r.decayed))
        })
        .collect()
}

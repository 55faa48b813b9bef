//! Numeric reference computations shared by the oracle tests and the
//! acceptance suite. None of these use the closed forms under test.
#![allow(dead_code)]

use nqm::dynamics::rollout_states;
use nqm::montecarlo::simulate;
use nqm::smd::{smd_online_run, SmdConfig};
use nqm::{init_state, meta_grad, meta_loss, rollout, step_stats, HyperStep, MomentState, QuadraticProblem, Schedule};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small problem and a moment state reached by a few random stable steps
/// from a random start, so velocity statistics are nonzero.
pub fn random_state<R: Rng>(rng: &mut R, d: usize) -> (QuadraticProblem, MomentState) {
    let h: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-2.0..0.0))).collect();
    let s2: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..5.0)).collect();
    let e0: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let v0: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
    let h_max = h.iter().cloned().fold(0.0, f64::max);
    let problem = QuadraticProblem::new(h, s2).unwrap();
    let mut state = init_state(&problem, &e0, &v0).unwrap();
    for _ in 0..3 {
        let a = rng.random_range(0.05..1.0) / h_max;
        let mu = rng.random_range(0.0..0.9);
        state = step_stats(&state, a, mu, &problem).unwrap();
    }
    (problem, state)
}

pub fn one_step_loss(problem: &QuadraticProblem, state: &MomentState, alpha: f64, mu: f64) -> f64 {
    problem.expected_loss(&step_stats(state, alpha, mu, problem).unwrap()).unwrap()
}

fn golden_section(lo: f64, hi: f64, iters: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (lo, hi);
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Minimizes the one-step loss by nested golden-section search: the outer
/// search over `α ∈ [0, 2/max h]`, the inner one over `μ ∈ [−1, 1]`.
pub fn numeric_one_step_min(problem: &QuadraticProblem, state: &MomentState) -> (f64, f64) {
    let h_max = problem.h().iter().cloned().fold(0.0, f64::max);
    let best_mu = |a: f64| golden_section(-1.0, 1.0, 90, |m| one_step_loss(problem, state, a, m));
    let alpha = golden_section(0.0, 2.0 / h_max, 90, |a| one_step_loss(problem, state, a, best_mu(a)));
    (alpha, best_mu(alpha))
}

/// Loss after SGD steps `alphas` on a univariate problem starting from
/// second moment `a0` (mean `√a0`, no variance).
pub fn univariate_loss(h: f64, s2: f64, a0: f64, alphas: &[f64]) -> f64 {
    let (mut e, mut v) = (a0.sqrt(), 0.0);
    for &a in alphas {
        let r = 1.0 - a * h;
        e *= r;
        v = r * r * v + a * a * h * h * s2;
    }
    0.5 * h * (e * e + v + s2)
}

/// Brute-force search over `T ≤ 3` SGD learning rates: a full grid of
/// `n` points per step on `[0, 2/h]`, then coordinate-wise golden-section
/// refinement around the best grid point. Returns the rates and loss.
pub fn brute_force_univariate(h: f64, s2: f64, a0: f64, t: usize, n: usize) -> (Vec<f64>, f64) {
    assert!((1..=3).contains(&t));
    let grid: Vec<f64> = (0..n).map(|j| 2.0 / h * j as f64 / (n - 1) as f64).collect();
    let mut best = (vec![0.0; t], f64::INFINITY);
    let mut idx = vec![0usize; t];
    loop {
        let alphas: Vec<f64> = idx.iter().map(|&j| grid[j]).collect();
        let l = univariate_loss(h, s2, a0, &alphas);
        if l < best.1 {
            best = (alphas, l);
        }
        let mut k = 0;
        while k < t {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == t {
            break;
        }
    }
    let cell = grid[1] - grid[0];
    let (mut alphas, _) = best;
    for _ in 0..20 {
        for k in 0..t {
            let (lo, hi) = ((alphas[k] - cell).max(0.0), alphas[k] + cell);
            let mut trial = alphas.clone();
            alphas[k] = golden_section(lo, hi, 80, |x| {
                trial[k] = x;
                univariate_loss(h, s2, a0, &trial)
            });
        }
    }
    let l = univariate_loss(h, s2, a0, &alphas);
    (alphas, l)
}

/// Random instance for gradient checks: `d ≤ 5`, `T ≤ 10`, stable schedule.
pub fn random_instance<R: Rng>(rng: &mut R) -> (QuadraticProblem, MomentState, Schedule) {
    let d = rng.random_range(1..=5);
    let (problem, state) = random_state(rng, d);
    let h_max = problem.h().iter().cloned().fold(0.0, f64::max);
    let t = rng.random_range(1..=10);
    let steps = (0..t)
        .map(|_| HyperStep::new(rng.random_range(0.05..0.9) / h_max, rng.random_range(0.0..0.95)))
        .collect();
    (problem, state, Schedule::new(steps).unwrap())
}

/// Worst componentwise relative error between the adjoint gradient on
/// `(log αₜ, log(1 − μₜ))` and central differences with relative step 1e-5
/// on those variables.
///
/// A central difference cannot resolve a component below roughly
/// `ε·|f| / step`; components smaller than that resolution divided by the
/// tolerance are measured against it instead of their own size.
pub fn gradient_fd_error(problem: &QuadraticProblem, init: &MomentState, schedule: &Schedule, tol: f64) -> f64 {
    let (loss, g) = meta_grad(problem, init, schedule).unwrap();
    let n = schedule.len();
    let mut vars: Vec<f64> = schedule.alphas().iter().map(|a| a.ln()).collect();
    vars.extend(schedule.mus().iter().map(|m| (1.0 - m).ln()));
    let f = |x: &[f64]| {
        let steps = (0..n).map(|t| HyperStep::new(x[t].exp(), 1.0 - x[n + t].exp())).collect();
        meta_loss(problem, init, &Schedule::new(steps).unwrap()).unwrap()
    };
    (0..2 * n)
        .map(|j| {
            let eps = 1e-5 * vars[j].abs().max(1.0);
            let (mut plus, mut minus) = (vars.clone(), vars.clone());
            plus[j] += eps;
            minus[j] -= eps;
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            let resolution = f64::EPSILON * loss.abs() / eps / tol;
            (g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(resolution)
        })
        .fold(0.0, f64::max)
}

/// Whether a greedy step lies inside the numeric search box with some margin.
pub fn interior_greedy(problem: &QuadraticProblem, alpha: f64, mu: f64) -> bool {
    let h_max = problem.h().iter().cloned().fold(0.0, f64::max);
    alpha > 0.0 && alpha < 1.98 / h_max && mu.abs() < 0.99
}

/// Inputs for the invariant properties.
#[derive(Debug, Clone)]
pub struct Case {
    pub problem: QuadraticProblem,
    pub init: MomentState,
    pub schedule: Schedule,
    pub cut: usize,
    pub seed: u64,
}

/// Problems with `d ≤ 6`, arbitrary nonnegative initial variances and
/// schedules inside the stable region `αh ≤ 1`.
pub fn case() -> impl Strategy<Value = Case> {
    (1usize..=6)
        .prop_flat_map(|d| {
            (
                prop::collection::vec(1e-3f64..1.0, d),
                prop::collection::vec(0.0f64..10.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(0.0f64..3.0, d),
                prop::collection::vec((0.0f64..1.0, 0.0f64..0.99), 0..30),
                0usize..30,
                any::<u64>(),
            )
        })
        .prop_map(|(h, s2, e0, v0, steps, cut, seed)| {
            let h_max = h.iter().cloned().fold(0.0, f64::max);
            let problem = QuadraticProblem::new(h, s2).unwrap();
            let init = init_state(&problem, &e0, &v0).unwrap();
            let steps = steps.into_iter().map(|(a, mu)| HyperStep::new(a / h_max, mu)).collect();
            Case {
                problem,
                init,
                schedule: Schedule::new(steps).unwrap(),
                cut,
                seed,
            }
        })
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

pub fn variances_nonnegative(c: &Case) -> Result<(), TestCaseError> {
    for (t, s) in rollout_states(&c.problem, &c.init, &c.schedule).unwrap().iter().enumerate() {
        check(s.v_theta.iter().chain(&s.v_v).all(|v| *v >= 0.0), || format!("negative variance at step {t}"))?;
    }
    Ok(())
}

pub fn cauchy_schwarz(c: &Case) -> Result<(), TestCaseError> {
    for s in rollout_states(&c.problem, &c.init, &c.schedule).unwrap() {
        for i in 0..s.dim() {
            let m = s.get(i);
            check(m.cov * m.cov <= m.v_theta * m.v_v * (1.0 + 1e-9) + 1e-300, || format!("{m:?}"))?;
        }
    }
    Ok(())
}

/// Stepping to a snapshot and resuming from it reproduces the full rollout
/// bit for bit, and never touches the caller's state.
pub fn snapshot_integrity(c: &Case) -> Result<(), TestCaseError> {
    let states = rollout_states(&c.problem, &c.init, &c.schedule).unwrap();
    let k = c.cut.min(c.schedule.len());
    let before = c.init.clone();
    let mut s = c.init.clone();
    for step in &c.schedule.steps()[..k] {
        s = step_stats(&s, step.alpha, step.mu, &c.problem).unwrap();
    }
    check(s == states[k], || format!("stepped state differs from snapshot {k}"))?;
    check(before == c.init, || "initial state was modified".into())?;
    let rest = Schedule::new(c.schedule.steps()[k..].to_vec()).unwrap();
    let resumed = rollout(&c.problem, &s, &rest, None).unwrap();
    check(&resumed.final_state == states.last().unwrap(), || "resumed rollout differs".into())
}

pub fn permutation_equivariance(c: &Case) -> Result<(), TestCaseError> {
    let d = c.problem.dim();
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(c.seed));
    let p2 = c.problem.permuted(&perm).unwrap();
    let i2 = c.init.permuted(&perm).unwrap();
    let a = rollout(&c.problem, &c.init, &c.schedule, None).unwrap();
    let b = rollout(&p2, &i2, &c.schedule, None).unwrap();
    check(b.final_state == a.final_state.permuted(&perm).unwrap(), || format!("state not permuted by {perm:?}"))?;
    for (x, y) in a.losses.iter().zip(&b.losses) {
        check((x - y).abs() <= 1e-12 * x.abs().max(y.abs()), || format!("loss {x} vs {y}"))?;
    }
    Ok(())
}

/// Same seed, same Monte Carlo estimate and same online SMD trace.
pub fn determinism_under_seed(c: &Case) -> Result<(), TestCaseError> {
    let d = c.problem.dim();
    let theta0 = c.init.e_theta.clone();
    let v0 = vec![0.0; d];
    let sched = Schedule::new(c.schedule.steps().iter().take(8).copied().collect()).unwrap();
    let a = simulate(&c.problem, &theta0, &v0, &sched, 64, c.seed).unwrap();
    let b = simulate(&c.problem, &theta0, &v0, &sched, 64, c.seed).unwrap();
    check(a == b, || "simulation differs between identical seeds".into())?;
    let cfg = SmdConfig {
        seed: c.seed,
        lookahead: 2,
        meta_updates: 3,
        adapt_every: 4,
        ..SmdConfig::default()
    };
    let run = || smd_online_run(&c.problem, &theta0, &v0, HyperStep::new(0.05, 0.5), &cfg, 12);
    match (run(), run()) {
        (Ok(a), Ok(b)) => check(a == b, || "SMD trace differs between identical seeds".into()),
        (Err(a), Err(b)) => check(a.to_string() == b.to_string(), || "different errors".into()),
        _ => check(false, || "one SMD run failed and the other did not".into()),
    }
}

/// The invariant properties by name.
pub const PROPERTIES: [(&str, fn(&Case) -> Result<(), TestCaseError>); 5] = [
    ("variance nonnegativity", variances_nonnegative),
    ("Cauchy-Schwarz", cauchy_schwarz),
    ("snapshot integrity", snapshot_integrity),
    ("determinism under seed", determinism_under_seed),
    ("permutation equivariance", permutation_equivariance),
];

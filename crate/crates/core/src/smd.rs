//! Stochastic meta-descent on the noisy quadratic: a single global learning
//! rate and momentum adapted online from exact forward-mode hypergradients
//! of a short lookahead.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::MomentState;
use crate::error::{check_dim, NqmError, Result};
use crate::meta_opt::{alpha_to_var, meta_loss, mu_from_var, mu_to_var, mu_var_bounds, AdamState, LOG_ALPHA_MIN};
use crate::quad_model::QuadraticProblem;
use crate::schedules::{HyperStep, InverseTimeDecay};

/// Coordinates in which hyperparameter sensitivities are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    /// `(α, μ)` directly.
    Raw,
    /// `(log α, log(1 − μ))`.
    Log,
}

impl Coordinates {
    /// `(∂α/∂w, ∂μ/∂w)` for each of the two variables.
    fn jacobian(self, hyper: HyperStep) -> [(f64, f64); 2] {
        match self {
            Coordinates::Raw => [(1.0, 0.0), (0.0, 1.0)],
            Coordinates::Log => [(hyper.alpha, 0.0), (0.0, -(1.0 - hyper.mu))],
        }
    }
}

/// Derivatives of the iterate and velocity with respect to one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
}

impl Sensitivity {
    fn zeros(d: usize) -> Self {
        Sensitivity {
            theta: vec![0.0; d],
            v: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmdState {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: HyperStep,
    /// One block per hyperparameter variable, learning rate first.
    pub u: [Sensitivity; 2],
    pub round: usize,
}

impl SmdState {
    pub fn new(theta: Vec<f64>, v: Vec<f64>, hyper: HyperStep) -> Result<Self> {
        check_dim(theta.len(), v.len())?;
        let d = theta.len();
        Ok(SmdState {
            theta,
            v,
            hyper,
            u: [Sensitivity::zeros(d), Sensitivity::zeros(d)],
            round: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn reset_sensitivity(&mut self) {
        for u in &mut self.u {
            u.theta.iter_mut().for_each(|x| *x = 0.0);
            u.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

fn sensitivity_step(s: &mut SmdState, problem: &QuadraticProblem, c: &[f64], coords: Coordinates) {
    let h = problem.h();
    let HyperStep { alpha, mu } = s.hyper;
    let jac = coords.jacobian(s.hyper);
    let [u0, u1] = &mut s.u;
    for i in 0..s.theta.len() {
        let g = h[i] * (s.theta[i] - c[i]);
        for (u, &(da, dm)) in [&mut *u0, &mut *u1].into_iter().zip(&jac) {
            let uv = dm * s.v[i] + mu * u.v[i] - da * g - alpha * h[i] * u.theta[i];
            u.v[i] = uv;
            u.theta[i] += uv;
        }
        s.v[i] = mu * s.v[i] - alpha * g;
        s.theta[i] += s.v[i];
    }
}

/// One base update `v ← μv − α h⊙(θ − c)`, `θ ← θ + v`, carrying the
/// sensitivities of `(θ, v)` to both hyperparameter variables along.
pub fn forward_sensitivity_step(
    s: &SmdState,
    problem: &QuadraticProblem,
    c: &[f64],
    coords: Coordinates,
) -> Result<SmdState> {
    check_dim(problem.dim(), s.dim())?;
    check_dim(problem.dim(), c.len())?;
    let mut next = s.clone();
    sensitivity_step(&mut next, problem, c, coords);
    Ok(next)
}

/// Noise used along a lookahead.
pub enum LookaheadNoise<'a, R: Rng + ?Sized> {
    /// A fresh minimum for each of the `T` steps and for the final gradient.
    Fresh(&'a mut R),
    /// One minimum reused for every step and the final gradient.
    Shared(&'a [f64]),
    /// Exactly `T + 1` minima, the last one for the final gradient.
    Explicit(&'a [Vec<f64>]),
}

/// Hypergradient of the sampled loss after `T` lookahead steps from
/// `(θ₀, v₀)`: `h⊙(θ_T − c_T) · u_T` for each variable. The caller's iterate
/// is not modified.
pub fn lookahead_hypergrad<R: Rng + ?Sized>(
    problem: &QuadraticProblem,
    theta0: &[f64],
    v0: &[f64],
    hyper: HyperStep,
    lookahead: usize,
    noise: LookaheadNoise<'_, R>,
    coords: Coordinates,
) -> Result<[f64; 2]> {
    check_dim(problem.dim(), theta0.len())?;
    if lookahead == 0 {
        return Err(NqmError::arg("lookahead must be at least one step"));
    }
    let mut s = SmdState::new(theta0.to_vec(), v0.to_vec(), hyper)?;
    let final_c = match noise {
        LookaheadNoise::Fresh(rng) => {
            for _ in 0..lookahead {
                let c = problem.sample_minimum(rng);
                sensitivity_step(&mut s, problem, &c, coords);
            }
            problem.sample_minimum(rng)
        }
        LookaheadNoise::Shared(c) => {
            check_dim(problem.dim(), c.len())?;
            for _ in 0..lookahead {
                sensitivity_step(&mut s, problem, c, coords);
            }
            c.to_vec()
        }
        LookaheadNoise::Explicit(cs) => {
            check_dim(lookahead + 1, cs.len())?;
            for c in &cs[..lookahead] {
                check_dim(problem.dim(), c.len())?;
                sensitivity_step(&mut s, problem, c, coords);
            }
            check_dim(problem.dim(), cs[lookahead].len())?;
            cs[lookahead].clone()
        }
    };
    let h = problem.h();
    let mut grad = [0.0; 2];
    for i in 0..s.dim() {
        let g = h[i] * (s.theta[i] - final_c[i]);
        grad[0] += g * s.u[0].theta[i];
        grad[1] += g * s.u[1].theta[i];
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmdConfig {
    pub lookahead: usize,
    pub meta_updates: usize,
    pub adapt_every: usize,
    pub deterministic_lookahead: bool,
    pub seed: u64,
    pub meta_lr: f64,
    /// Upper bound on the adapted learning rate.
    pub alpha_max: f64,
}

impl Default for SmdConfig {
    fn default() -> Self {
        SmdConfig {
            lookahead: 5,
            meta_updates: 100,
            adapt_every: 10,
            deterministic_lookahead: false,
            seed: 0,
            meta_lr: 0.01,
            alpha_max: 10.0,
        }
    }
}

impl SmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookahead == 0 || self.meta_updates == 0 || self.adapt_every == 0 {
            return Err(NqmError::arg("lookahead, meta_updates and adapt_every must be >= 1"));
        }
        if !(self.meta_lr > 0.0 && self.alpha_max > 0.0) {
            return Err(NqmError::arg("meta_lr and alpha_max must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmdRow {
    pub step: usize,
    pub alpha: f64,
    pub mu: f64,
    pub sampled_loss: f64,
    pub expected_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmdTrace {
    /// Row `t` holds the iterate after `t` base steps and the
    /// hyperparameters used for the next step.
    pub rows: Vec<SmdRow>,
    /// Hyperparameters at the end of every adaptation round.
    pub rounds: Vec<HyperStep>,
}

impl SmdTrace {
    pub fn final_expected_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.expected_loss)
    }

    /// Mean learning rate over the base steps actually taken.
    pub fn mean_alpha(&self) -> f64 {
        let n = self.rows.len().saturating_sub(1).max(1);
        self.rows.iter().take(n).map(|r| r.alpha).sum::<f64>() / n as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,alpha,mu,sampled_loss,expected_loss")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.step, r.alpha, r.mu, r.sampled_loss, r.expected_loss)?;
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Runs `meta_updates` Adam steps on `(log α, log(1 − μ))` from the current
/// iterate. Adam's moments start fresh each round.
fn adaptation_round(
    problem: &QuadraticProblem,
    theta: &[f64],
    v: &[f64],
    hyper: HyperStep,
    cfg: &SmdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<HyperStep> {
    let mut vars = [alpha_to_var(hyper.alpha), mu_to_var(hyper.mu)];
    let mut adam = AdamState::new(2);
    let (w_lo, w_hi) = mu_var_bounds();
    let la_hi = cfg.alpha_max.ln();
    for _ in 0..cfg.meta_updates {
        let current = HyperStep::new(vars[0].exp(), mu_from_var(vars[1]));
        let grad = if cfg.deterministic_lookahead {
            let c = problem.sample_minimum(rng);
            lookahead_hypergrad::<ChaCha8Rng>(
                problem,
                theta,
                v,
                current,
                cfg.lookahead,
                LookaheadNoise::Shared(&c),
                Coordinates::Log,
            )?
        } else {
            lookahead_hypergrad(problem, theta, v, current, cfg.lookahead, LookaheadNoise::Fresh(rng), Coordinates::Log)?
        };
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(NqmError::Instability {
                step: 0,
                dim: 0,
                detail: format!("non-finite hypergradient {grad:?} at alpha={}, mu={}", current.alpha, current.mu),
            });
        }
        adam.update(&mut vars, &grad, cfg.meta_lr, 0.9, 0.999, 1e-8);
        vars[0] = vars[0].clamp(LOG_ALPHA_MIN, la_hi);
        vars[1] = vars[1].clamp(w_lo, w_hi);
    }
    Ok(HyperStep::new(vars[0].exp(), mu_from_var(vars[1])))
}

/// Online adaptation: every `adapt_every` base steps, an adaptation round
/// from the current iterate, then training continues with the new values.
///
/// Base-step noise and lookahead noise come from separate streams of the
/// seed, so the lookahead mode does not change the base minibatches.
pub fn smd_online_run(
    problem: &QuadraticProblem,
    init_theta: &[f64],
    init_v: &[f64],
    hyper0: HyperStep,
    cfg: &SmdConfig,
    total_steps: usize,
) -> Result<SmdTrace> {
    cfg.validate()?;
    check_dim(problem.dim(), init_theta.len())?;
    check_dim(problem.dim(), init_v.len())?;
    if total_steps == 0 {
        return Err(NqmError::arg("total_steps must be at least 1"));
    }
    let mut base_rng = stream(cfg.seed, 0);
    let mut meta_rng = stream(cfg.seed, 1);
    let h = problem.h();
    let mut theta = init_theta.to_vec();
    let mut v = init_v.to_vec();
    let mut hyper = hyper0;
    let mut rows = Vec::with_capacity(total_steps + 1);
    let mut rounds = Vec::new();
    for t in 0..=total_steps {
        if t < total_steps && t % cfg.adapt_every == 0 {
            hyper = adaptation_round(problem, &theta, &v, hyper, cfg, &mut meta_rng).map_err(|e| e.at_step(t))?;
            rounds.push(hyper);
        }
        let c = problem.sample_minimum(&mut base_rng);
        rows.push(SmdRow {
            step: t,
            alpha: hyper.alpha,
            mu: hyper.mu,
            sampled_loss: problem.sampled_loss(&theta, &c)?,
            expected_loss: problem.loss_at(&theta)?,
        });
        if t == total_steps {
            break;
        }
        for i in 0..theta.len() {
            v[i] = hyper.mu * v[i] - hyper.alpha * h[i] * (theta[i] - c[i]);
            theta[i] += v[i];
        }
    }
    Ok(SmdTrace { rows, rounds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmdRunSummary {
    pub deterministic_lookahead: bool,
    pub mean_alpha: f64,
    pub final_expected_loss: f64,
    pub trace: SmdTrace,
}

/// Two online runs whose configurations differ only in the lookahead mode,
/// reported in the order given.
#[derive(Debug, Clone, PartialEq)]
pub struct SmdComparison {
    pub runs: [SmdRunSummary; 2],
}

impl SmdComparison {
    pub fn by_mode(&self, deterministic: bool) -> &SmdRunSummary {
        self.runs
            .iter()
            .find(|r| r.deterministic_lookahead == deterministic)
            .expect("one run per mode")
    }
}

pub fn smd_deterministic_vs_stochastic(
    problem: &QuadraticProblem,
    init_theta: &[f64],
    init_v: &[f64],
    hyper0: HyperStep,
    cfgs: [&SmdConfig; 2],
    total_steps: usize,
) -> Result<SmdComparison> {
    let normalized = |c: &SmdConfig| SmdConfig {
        deterministic_lookahead: false,
        ..c.clone()
    };
    if cfgs[0].deterministic_lookahead == cfgs[1].deterministic_lookahead || normalized(cfgs[0]) != normalized(cfgs[1]) {
        return Err(NqmError::arg("configurations must differ only in the lookahead mode"));
    }
    let runs: Vec<SmdRunSummary> = cfgs
        .par_iter()
        .map(|cfg| {
            let trace = smd_online_run(problem, init_theta, init_v, hyper0, cfg, total_steps)?;
            Ok(SmdRunSummary {
                deterministic_lookahead: cfg.deterministic_lookahead,
                mean_alpha: trace.mean_alpha(),
                final_expected_loss: trace.final_expected_loss(),
                trace,
            })
        })
        .collect::<Result<_>>()?;
    let [a, b]: [SmdRunSummary; 2] = runs.try_into().expect("two runs");
    Ok(SmdComparison { runs: [a, b] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceRow {
    pub horizon: usize,
    pub alpha0: f64,
    pub beta: f64,
    /// Infinite where the rollout diverged.
    pub meta_loss: f64,
}

/// Evenly spaced points on `[lo, hi]`; a single point requires `lo == hi`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(NqmError::arg("grid needs at least one point")),
        1 if lo == hi => Ok(vec![lo]),
        1 => Err(NqmError::arg("a one-point axis needs equal endpoints")),
        _ => Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()),
    }
}

/// Exact meta-loss of the inverse time decay schedule over an `(α₀, β)`
/// grid at each horizon. Rows are ordered by horizon, then `α₀`, then `β`.
pub fn surface_sample(
    problem: &QuadraticProblem,
    init: &MomentState,
    horizons: &[usize],
    alpha0: &[f64],
    beta: &[f64],
) -> Result<Vec<SurfaceRow>> {
    check_dim(problem.dim(), init.dim())?;
    if alpha0.iter().any(|a| !(*a >= 0.0)) {
        return Err(NqmError::arg("alpha0 grid values must be >= 0"));
    }
    let points: Vec<(usize, f64, f64)> = horizons
        .iter()
        .flat_map(|&t| alpha0.iter().flat_map(move |&a| beta.iter().map(move |&b| (t, a, b))))
        .collect();
    points
        .par_iter()
        .map(|&(horizon, alpha0, beta)| {
            let sched = InverseTimeDecay::new(alpha0, beta).materialize(horizon);
            let meta_loss = match meta_loss(problem, init, &sched) {
                Ok(l) => l,
                Err(NqmError::Instability { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok(SurfaceRow {
                horizon,
                alpha0,
                beta,
                meta_loss,
            })
        })
        .collect()
}

pub fn write_surface_csv<W: Write>(rows: &[SurfaceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "horizon,alpha0,beta,meta_loss")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.horizon, r.alpha0, r.beta, r.meta_loss)?;
    }
    Ok(())
}

//! Gradient-based fitting of schedules against the exact moment dynamics.
//!
//! The meta-objective is the expected loss after `T` steps. Its gradient with
//! respect to every `(αₜ, μₜ)` comes from a reverse sweep through the moment
//! recurrence. Because dimensions never interact, the sweep runs one
//! dimension at a time and only keeps that dimension's trajectory.
//!
//! Optimization variables are `log α` and `log(1 − μ)`; the latter is clamped
//! so that `μ ∈ [0, 0.999]`.

use crate::dynamics::{rollout, DimMoments, MomentState};
use crate::error::{check_dim, NqmError, Result};
use crate::quad_model::QuadraticProblem;
use crate::schedules::{HyperStep, InverseTimeDecay, Schedule};

/// Largest momentum reachable through the `log(1 − μ)` variable.
pub const MU_MAX: f64 = 0.999;
/// Floor on `log α` so that a zero cap still maps to a finite variable.
pub const LOG_ALPHA_MIN: f64 = -40.0;
/// Relative slack allowed when testing a loss term against its initial value.
pub const CAP_TOLERANCE: f64 = 1e-12;

pub fn mu_var_bounds() -> (f64, f64) {
    ((1.0 - MU_MAX).ln(), 0.0)
}

#[inline]
pub fn mu_from_var(w: f64) -> f64 {
    let (lo, hi) = mu_var_bounds();
    1.0 - w.clamp(lo, hi).exp()
}

#[inline]
pub fn mu_to_var(mu: f64) -> f64 {
    let (lo, hi) = mu_var_bounds();
    (1.0 - mu.clamp(0.0, MU_MAX)).ln().clamp(lo, hi)
}

#[inline]
pub fn alpha_to_var(alpha: f64) -> f64 {
    if alpha > 0.0 {
        alpha.ln().max(LOG_ALPHA_MIN)
    } else {
        LOG_ALPHA_MIN
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    PerStep,
    Fixed,
    InverseTimeDecay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub horizon: usize,
    pub meta_lr: f64,
    pub meta_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub cap_enabled: bool,
    pub parameterization: Parameterization,
    /// Initial `αₜ` as a fraction of the step's cap.
    pub init_alpha_frac: f64,
    pub init_mu: f64,
    /// Starting decay exponent for the inverse time decay fit.
    pub init_beta: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            horizon: 250,
            meta_lr: 0.003,
            meta_steps: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            cap_enabled: true,
            parameterization: Parameterization::PerStep,
            init_alpha_frac: 0.5,
            init_mu: 0.9,
            init_beta: 1.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.meta_lr > 0.0
            && self.meta_steps >= 1
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0
            && self.init_alpha_frac > 0.0
            && (0.0..=MU_MAX).contains(&self.init_mu)
            && self.init_beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NqmError::arg(format!("invalid meta configuration: {self:?}")))
        }
    }

    fn expect(&self, p: Parameterization) -> Result<()> {
        self.validate()?;
        if self.parameterization != p {
            return Err(NqmError::arg(format!(
                "configuration is for {:?}, not {p:?}",
                self.parameterization
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Functional form of one Adam update.
pub fn adam_step(adam: &AdamState, params: &[f64], grad: &[f64], cfg: &MetaConfig) -> (AdamState, Vec<f64>) {
    let mut next = adam.clone();
    let mut out = params.to_vec();
    next.update(&mut out, grad, cfg.meta_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    (next, out)
}

/// Expected loss after running the whole schedule.
pub fn meta_loss(problem: &QuadraticProblem, init: &MomentState, schedule: &Schedule) -> Result<f64> {
    Ok(rollout(problem, init, schedule, None)?.final_loss())
}

/// Gradient of the final expected loss with respect to raw `αₜ` and `μₜ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleGradient {
    pub loss: f64,
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
}

impl ScheduleGradient {
    /// Chain rule onto `log αₜ` and `log(1 − μₜ)`.
    pub fn reparameterized(&self, schedule: &Schedule) -> (Vec<f64>, Vec<f64>) {
        let steps = schedule.steps();
        let d_log_alpha = steps.iter().zip(&self.alpha).map(|(s, g)| s.alpha * g).collect();
        let d_mu_var = steps.iter().zip(&self.mu).map(|(s, g)| -(1.0 - s.mu) * g).collect();
        (d_log_alpha, d_mu_var)
    }
}

/// Reverse sweep through one dimension's trajectory. Accumulates into the
/// per-step gradients and returns the dimension's final loss term.
fn adjoint_dim(
    h: f64,
    sigma2: f64,
    init: DimMoments,
    steps: &[HyperStep],
    traj: &mut Vec<DimMoments>,
    d_alpha: &mut [f64],
    d_mu: &mut [f64],
) -> std::result::Result<f64, String> {
    traj.clear();
    let mut m = init;
    for s in steps {
        traj.push(m);
        m = m.step(s.alpha * h, s.mu, sigma2)?;
    }
    let loss = 0.5 * h * (m.e_theta * m.e_theta + m.v_theta + sigma2);

    let mut g = DimMoments {
        e_theta: h * m.e_theta,
        e_v: 0.0,
        v_theta: 0.5 * h,
        v_v: 0.0,
        cov: 0.0,
    };
    for (t, s) in steps.iter().enumerate().rev() {
        let p = traj[t];
        let (a, mu) = (s.alpha * h, s.mu);
        // V[v⁺] feeds V[θ⁺] and Cov⁺ directly, E[v⁺] feeds E[θ⁺]
        let g_vv = g.v_v + g.v_theta + g.cov;
        let g_ev = g.e_v + g.e_theta;

        let d_a = -p.e_theta * g_ev + 2.0 * (a * p.v_theta - mu * p.cov + a * sigma2) * g_vv
            - 2.0 * p.v_theta * g.v_theta
            - p.v_theta * g.cov;
        let d_m = p.e_v * g_ev + 2.0 * (mu * p.v_v - a * p.cov) * g_vv + 2.0 * p.cov * g.v_theta + p.cov * g.cov;
        d_alpha[t] += h * d_a;
        d_mu[t] += d_m;

        g = DimMoments {
            e_theta: g.e_theta - a * g_ev,
            e_v: mu * g_ev,
            v_theta: a * a * g_vv + (1.0 - 2.0 * a) * g.v_theta - a * g.cov,
            v_v: mu * mu * g_vv,
            cov: -2.0 * mu * a * g_vv + 2.0 * mu * g.v_theta + mu * g.cov,
        };
    }
    Ok(loss)
}

/// Exact gradient of [`meta_loss`] with respect to the raw schedule values.
pub fn meta_grad_raw(
    problem: &QuadraticProblem,
    init: &MomentState,
    schedule: &Schedule,
) -> Result<ScheduleGradient> {
    check_dim(problem.dim(), init.dim())?;
    let n = schedule.len();
    let mut d_alpha = vec![0.0; n];
    let mut d_mu = vec![0.0; n];
    let mut traj = Vec::with_capacity(n);
    let mut loss = 0.0;
    for i in 0..problem.dim() {
        match adjoint_dim(
            problem.h()[i],
            problem.sigma2()[i],
            init.get(i),
            schedule.steps(),
            &mut traj,
            &mut d_alpha,
            &mut d_mu,
        ) {
            Ok(l) => loss += l,
            // rerun step-major so the error names the earliest failing step
            Err(_) => return Err(rollout(problem, init, schedule, None).err().unwrap_or_else(|| {
                NqmError::Instability {
                    step: 0,
                    dim: i,
                    detail: "adjoint sweep failed".into(),
                }
            })),
        }
    }
    Ok(ScheduleGradient {
        loss,
        alpha: d_alpha,
        mu: d_mu,
    })
}

/// Gradient of the meta-loss on `(log αₜ, log(1 − μₜ))`, concatenated as
/// `[d log α₀ .. d log α_{T−1}, d w₀ .. d w_{T−1}]`.
pub fn meta_grad(problem: &QuadraticProblem, init: &MomentState, schedule: &Schedule) -> Result<(f64, Vec<f64>)> {
    let g = meta_grad_raw(problem, init, schedule)?;
    let (mut da, dm) = g.reparameterized(schedule);
    da.extend(dm);
    Ok((g.loss, da))
}

/// Per-dimension initial loss terms `½ hᵢ (A(θᵢ⁰) + σᵢ²)`.
pub fn initial_dim_losses(problem: &QuadraticProblem, init: &MomentState) -> Vec<f64> {
    (0..problem.dim())
        .map(|i| problem.dim_loss(i, init.e_theta[i], init.v_theta[i]))
        .collect()
}

/// Coefficients of the one-step loss term minus its initial value, as a
/// quadratic in `α` at fixed `μ`.
#[inline]
fn alpha_quadratic(h: f64, sigma2: f64, m: &DimMoments, mu: f64, l0: f64) -> (f64, f64, f64) {
    let (at, av, x) = (m.a_theta(), m.a_v(), m.e_theta_v());
    let c2 = 0.5 * h * h * h * (at + sigma2);
    let c1 = -h * h * (at + mu * x);
    let c0 = 0.5 * h * (at + mu * mu * av + 2.0 * mu * x + sigma2) - l0;
    (c2, c1, c0)
}

/// Largest root of `c2 x² + c1 x + c0` given `c2 > 0` and `c0 ≤ 0`.
#[inline]
fn upper_root(c2: f64, c1: f64, c0: f64) -> f64 {
    let disc = (c1 * c1 - 4.0 * c2 * c0).max(0.0);
    let r = if c1 <= 0.0 {
        (-c1 + disc.sqrt()) / (2.0 * c2)
    } else {
        2.0 * c0 / (-c1 - disc.sqrt())
    };
    r.max(0.0)
}

fn dim_alpha_cap(h: f64, sigma2: f64, m: &DimMoments, mu: f64, l0: f64) -> f64 {
    let (c2, c1, c0) = alpha_quadratic(h, sigma2, m, mu, l0);
    if c0 > CAP_TOLERANCE * l0.abs() {
        return 0.0;
    }
    if c2 <= 0.0 {
        // A(θ) = σ² = 0: the step size cannot change this term
        return f64::INFINITY;
    }
    upper_root(c2, c1, c0.min(0.0))
}

/// Largest `μ ≥ 0` for which a zero learning rate keeps the term at or below `l0`.
fn dim_mu_cap(h: f64, sigma2: f64, m: &DimMoments, l0: f64) -> f64 {
    let c2 = 0.5 * h * m.a_v();
    let c1 = h * m.e_theta_v();
    let c0 = 0.5 * h * (m.a_theta() + sigma2) - l0;
    if c0 > CAP_TOLERANCE * l0.abs() {
        return 0.0;
    }
    if c2 <= 0.0 {
        return f64::INFINITY;
    }
    upper_root(c2, c1, c0.min(0.0))
}

/// Upper bound on the learning rate for dimension `i` at the current state
/// and momentum: the largest `α` whose one-step-ahead loss term stays at or
/// below its initial value. Zero if even `α = 0` would exceed it.
pub fn alpha_cap(problem: &QuadraticProblem, init: &MomentState, state: &MomentState, i: usize, mu: f64) -> f64 {
    let l0 = problem.dim_loss(i, init.e_theta[i], init.v_theta[i]);
    dim_alpha_cap(problem.h()[i], problem.sigma2()[i], &state.get(i), mu, l0)
}

/// Cap applied to a whole step: the minimum over dimensions.
pub fn step_alpha_cap(problem: &QuadraticProblem, l0: &[f64], state: &MomentState, mu: f64) -> f64 {
    let (h, s2) = (problem.h(), problem.sigma2());
    (0..problem.dim())
        .map(|i| dim_alpha_cap(h[i], s2[i], &state.get(i), mu, l0[i]))
        .fold(f64::INFINITY, f64::min)
}

/// Momentum bound for a step: if momentum alone would push some term above
/// its initial value, the largest `μ` that does not.
pub fn step_mu_cap(problem: &QuadraticProblem, l0: &[f64], state: &MomentState) -> f64 {
    let (h, s2) = (problem.h(), problem.sigma2());
    (0..problem.dim())
        .map(|i| dim_mu_cap(h[i], s2[i], &state.get(i), l0[i]))
        .fold(f64::INFINITY, f64::min)
}

/// Projects per-step variables onto the feasible set, walking forward in time.
///
/// When `cap` is set, each `μₜ` is first reduced if momentum alone would
/// violate the bound, then `αₜ` is clipped to the step's cap. The
/// `log(1 − μ)` variables are always clamped to their range.
fn project_per_step(
    problem: &QuadraticProblem,
    init: &MomentState,
    l0: &[f64],
    log_alpha: &mut [f64],
    mu_var: &mut [f64],
    cap: bool,
) -> Result<()> {
    let (lo, hi) = mu_var_bounds();
    for w in mu_var.iter_mut() {
        *w = w.clamp(lo, hi);
    }
    if !cap {
        return Ok(());
    }
    let mut state = init.clone();
    for t in 0..log_alpha.len() {
        let mut mu = mu_from_var(mu_var[t]);
        let mu_cap = step_mu_cap(problem, l0, &state);
        if mu > mu_cap {
            mu = mu_cap.max(0.0);
            mu_var[t] = mu_to_var(mu);
            mu = mu_from_var(mu_var[t]);
        }
        let alpha_cap = step_alpha_cap(problem, l0, &state, mu);
        if log_alpha[t].exp() > alpha_cap {
            log_alpha[t] = alpha_to_var(alpha_cap);
        }
        crate::dynamics::step_in_place(&mut state, log_alpha[t].exp(), mu, problem).map_err(|e| e.at_step(t))?;
    }
    Ok(())
}

fn schedule_from_vars(log_alpha: &[f64], mu_var: &[f64]) -> Result<Schedule> {
    Schedule::new(
        log_alpha
            .iter()
            .zip(mu_var)
            .map(|(&la, &w)| HyperStep::new(la.exp(), mu_from_var(w)))
            .collect(),
    )
}

/// Largest ratio of any loss term, at any step, to its initial value.
pub fn max_loss_ratio(problem: &QuadraticProblem, init: &MomentState, schedule: &Schedule) -> Result<f64> {
    check_dim(problem.dim(), init.dim())?;
    let (h, s2) = (problem.h(), problem.sigma2());
    let mut worst: f64 = 0.0;
    for i in 0..problem.dim() {
        let mut m = init.get(i);
        let l0 = problem.dim_loss(i, m.e_theta, m.v_theta);
        for (t, step) in schedule.steps().iter().enumerate() {
            m = m
                .step(step.alpha * h[i], step.mu, s2[i])
                .map_err(|detail| NqmError::Instability { step: t, dim: i, detail })?;
            let l = 0.5 * h[i] * (m.a_theta() + s2[i]);
            let r = if l0 > 0.0 {
                l / l0
            } else if l > 0.0 {
                f64::INFINITY
            } else {
                1.0
            };
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Whether every loss term stays within `1e-9` relative of its initial value
/// along the whole rollout. Stops at the first violation.
fn feasible(problem: &QuadraticProblem, init: &MomentState, l0: &[f64], schedule: &Schedule) -> bool {
    let (h, s2) = (problem.h(), problem.sigma2());
    for i in 0..problem.dim() {
        let bound = l0[i] * (1.0 + 1e-9);
        let mut m = init.get(i);
        for step in schedule.steps() {
            m = match m.step(step.alpha * h[i], step.mu, s2[i]) {
                Ok(next) => next,
                Err(_) => return false,
            };
            if 0.5 * h[i] * (m.a_theta() + s2[i]) > bound {
                return false;
            }
        }
    }
    true
}

/// Shrinks a shared learning-rate scale until the schedule respects the cap.
/// `build(scale)` must give a feasible schedule as `scale → 0`. The result is
/// feasible and within `1e-4` relative of the largest feasible scale.
fn project_scale(
    problem: &QuadraticProblem,
    init: &MomentState,
    l0: &[f64],
    scale: f64,
    build: impl Fn(f64) -> Schedule,
) -> f64 {
    let ok = |x: f64| feasible(problem, init, l0, &build(x));
    if ok(scale) {
        return scale;
    }
    // updates are small, so search outward from just below the current value
    let mut hi = scale;
    let mut shrink = 1e-4;
    let mut lo = loop {
        let x = if shrink < 0.5 { scale * (1.0 - shrink) } else { hi * 0.5 };
        if x < 1e-300 {
            return 0.0;
        }
        if ok(x) {
            break x;
        }
        hi = x;
        shrink *= 4.0;
    };
    while hi / lo > 1.0 + 1e-4 {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Result of a meta-optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaFit<P> {
    /// Best iterate by meta-loss.
    pub params: P,
    pub best_loss: f64,
    /// Meta-loss of every evaluated iterate, in order.
    pub trace: Vec<f64>,
}

/// Initial per-step schedule: momentum `init_mu` (reduced where required by
/// the cap) and `αₜ` a fixed fraction of each step's cap.
pub fn initial_per_step(problem: &QuadraticProblem, init: &MomentState, cfg: &MetaConfig) -> Result<Schedule> {
    let l0 = initial_dim_losses(problem, init);
    let mut state = init.clone();
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut last_alpha = 1.0 / problem.h().iter().cloned().fold(0.0, f64::max);
    for t in 0..cfg.horizon {
        let mu = cfg.init_mu.min(step_mu_cap(problem, &l0, &state).max(0.0));
        let cap = step_alpha_cap(problem, &l0, &state, mu);
        let alpha = if cap.is_finite() { cfg.init_alpha_frac * cap } else { last_alpha };
        last_alpha = alpha;
        crate::dynamics::step_in_place(&mut state, alpha, mu, problem).map_err(|e| e.at_step(t))?;
        steps.push(HyperStep::new(alpha, mu));
    }
    Schedule::new(steps)
}

/// Fits one `(αₜ, μₜ)` pair per step with Adam, projecting onto the cap
/// after every update. Returns the best schedule seen.
pub fn optimize_schedule(
    problem: &QuadraticProblem,
    init: &MomentState,
    cfg: &MetaConfig,
) -> Result<MetaFit<Schedule>> {
    cfg.expect(Parameterization::PerStep)?;
    check_dim(problem.dim(), init.dim())?;
    let start = initial_per_step(problem, init, cfg)?;
    optimize_schedule_from(problem, init, cfg, &start)
}

/// [`optimize_schedule`] from a caller-supplied starting schedule.
pub fn optimize_schedule_from(
    problem: &QuadraticProblem,
    init: &MomentState,
    cfg: &MetaConfig,
    start: &Schedule,
) -> Result<MetaFit<Schedule>> {
    cfg.validate()?;
    let n = start.len();
    let l0 = initial_dim_losses(problem, init);
    let mut log_alpha: Vec<f64> = start.alphas().into_iter().map(alpha_to_var).collect();
    let mut mu_var: Vec<f64> = start.mus().into_iter().map(mu_to_var).collect();
    project_per_step(problem, init, &l0, &mut log_alpha, &mut mu_var, cfg.cap_enabled)?;

    let mut adam = AdamState::new(2 * n);
    let mut params = vec![0.0; 2 * n];
    let mut trace = Vec::with_capacity(cfg.meta_steps + 1);
    let mut best: Option<(f64, Schedule)> = None;
    for k in 0..=cfg.meta_steps {
        let schedule = schedule_from_vars(&log_alpha, &mu_var)?;
        let (loss, grad) = meta_grad(problem, init, &schedule)?;
        trace.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, schedule));
        }
        if k == cfg.meta_steps {
            break;
        }
        params[..n].copy_from_slice(&log_alpha);
        params[n..].copy_from_slice(&mu_var);
        adam.update(&mut params, &grad, cfg.meta_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        log_alpha.copy_from_slice(&params[..n]);
        mu_var.copy_from_slice(&params[n..]);
        project_per_step(problem, init, &l0, &mut log_alpha, &mut mu_var, cfg.cap_enabled)?;
    }
    let (best_loss, params) = best.expect("at least one evaluation");
    Ok(MetaFit {
        params,
        best_loss,
        trace,
    })
}

/// Fits a single `(α, μ)` pair shared by all steps.
pub fn optimize_fixed(
    problem: &QuadraticProblem,
    init: &MomentState,
    cfg: &MetaConfig,
) -> Result<MetaFit<HyperStep>> {
    cfg.expect(Parameterization::Fixed)?;
    check_dim(problem.dim(), init.dim())?;
    let t = cfg.horizon;
    let l0 = initial_dim_losses(problem, init);
    let mu0 = cfg.init_mu.min(step_mu_cap(problem, &l0, init).max(0.0));
    let alpha0 = cfg.init_alpha_frac * step_alpha_cap(problem, &l0, init, mu0);
    let alpha0 = if alpha0.is_finite() { alpha0 } else { 1.0 };
    let mut vars = [alpha_to_var(alpha0), mu_to_var(mu0)];

    let project = |vars: &mut [f64; 2]| {
        let (lo, hi) = mu_var_bounds();
        vars[1] = vars[1].clamp(lo, hi);
        if cfg.cap_enabled {
            let mu = mu_from_var(vars[1]);
            let a = project_scale(problem, init, &l0, vars[0].exp(), |a| Schedule::constant(a, mu, t));
            vars[0] = alpha_to_var(a);
        }
    };
    project(&mut vars);

    let mut adam = AdamState::new(2);
    let mut trace = Vec::with_capacity(cfg.meta_steps + 1);
    let mut best: Option<(f64, HyperStep)> = None;
    for k in 0..=cfg.meta_steps {
        let step = HyperStep::new(vars[0].exp(), mu_from_var(vars[1]));
        let schedule = Schedule::constant(step.alpha, step.mu, t);
        let g = meta_grad_raw(problem, init, &schedule)?;
        trace.push(g.loss);
        if best.as_ref().is_none_or(|(b, _)| g.loss < *b) {
            best = Some((g.loss, step));
        }
        if k == cfg.meta_steps {
            break;
        }
        let grad = [
            step.alpha * g.alpha.iter().sum::<f64>(),
            -(1.0 - step.mu) * g.mu.iter().sum::<f64>(),
        ];
        adam.update(&mut vars, &grad, cfg.meta_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        project(&mut vars);
    }
    let (best_loss, params) = best.expect("at least one evaluation");
    Ok(MetaFit {
        params,
        best_loss,
        trace,
    })
}

/// Fits `α₀` and `β` of an inverse time decay schedule in log space, with
/// `μ` and `K` held at their defaults.
pub fn optimize_parametric(
    problem: &QuadraticProblem,
    init: &MomentState,
    cfg: &MetaConfig,
) -> Result<MetaFit<InverseTimeDecay>> {
    cfg.expect(Parameterization::InverseTimeDecay)?;
    check_dim(problem.dim(), init.dim())?;
    let l0 = initial_dim_losses(problem, init);
    let cap0 = step_alpha_cap(problem, &l0, init, InverseTimeDecay::DEFAULT_MU);
    let start_alpha0 = if cap0.is_finite() && cap0 > 0.0 {
        cfg.init_alpha_frac * cap0
    } else {
        cfg.init_alpha_frac / problem.h().iter().cloned().fold(0.0, f64::max)
    };
    let t = cfg.horizon;
    let with = |alpha0: f64, beta: f64| InverseTimeDecay::new(alpha0, beta);
    let mut vars = [start_alpha0.ln(), cfg.init_beta.ln()];
    let project = |vars: &mut [f64; 2]| {
        if cfg.cap_enabled {
            let beta = vars[1].exp();
            let a = project_scale(problem, init, &l0, vars[0].exp(), |a| with(a, beta).materialize(t));
            vars[0] = alpha_to_var(a);
        }
    };
    project(&mut vars);

    // d log(1 + t/K) factors for the β derivative
    let decay_logs: Vec<f64> = (0..t)
        .map(|s| (1.0 + s as f64 / InverseTimeDecay::DEFAULT_TIME_CONSTANT).ln())
        .collect();
    let mut adam = AdamState::new(2);
    let mut trace = Vec::with_capacity(cfg.meta_steps + 1);
    let mut best: Option<(f64, InverseTimeDecay)> = None;
    for k in 0..=cfg.meta_steps {
        let p = with(vars[0].exp(), vars[1].exp());
        let schedule = p.materialize(t);
        let g = meta_grad_raw(problem, init, &schedule)?;
        trace.push(g.loss);
        if best.as_ref().is_none_or(|(b, _)| g.loss < *b) {
            best = Some((g.loss, p));
        }
        if k == cfg.meta_steps {
            break;
        }
        let mut grad = [0.0, 0.0];
        for (s, step) in schedule.steps().iter().enumerate() {
            grad[0] += step.alpha * g.alpha[s];
            grad[1] -= step.alpha * g.alpha[s] * decay_logs[s] * p.beta;
        }
        adam.update(&mut vars, &grad, cfg.meta_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        project(&mut vars);
    }
    let (best_loss, params) = best.expect("at least one evaluation");
    Ok(MetaFit {
        params,
        best_loss,
        trace,
    })
}

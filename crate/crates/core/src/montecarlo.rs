//! Sampling oracle for the moment recurrence: simulates SGD with momentum
//! directly and compares empirical moments against the analytic ones.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{rollout_states, DimMoments, MomentState};
use crate::error::{check_dim, NqmError, Result};
use crate::quad_model::QuadraticProblem;
use crate::schedules::Schedule;

/// Trajectories per parallel work unit. Fixed so that the merge order, and
/// hence every output bit, does not depend on the thread count.
const BLOCK: usize = 2048;

/// Streaming central moments up to fourth order, mergeable in any grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d2 * delta * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        self.mean += delta * nb / n;
        self.n += other.n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    pub fn mean_se(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    /// Standard error of the sample variance from the sample fourth moment.
    pub fn variance_se(&self) -> f64 {
        let n = self.n as f64;
        if self.n < 4 {
            return 0.0;
        }
        let s2 = self.variance();
        let mu4 = self.m4 / n;
        let var = (mu4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n;
        var.max(0.0).sqrt()
    }
}

/// Empirical statistics over simulated trajectories. Indexed `[step][dim]`
/// with step 0 the initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub n: usize,
    pub theta: Vec<Vec<Moments>>,
    pub v: Vec<Vec<Moments>>,
    /// Exact loss of each realized iterate, per step.
    pub loss: Vec<Moments>,
}

impl McEstimate {
    fn empty(steps: usize, dim: usize) -> Self {
        McEstimate {
            n: 0,
            theta: vec![vec![Moments::default(); dim]; steps],
            v: vec![vec![Moments::default(); dim]; steps],
            loss: vec![Moments::default(); steps],
        }
    }

    fn merge(&mut self, other: &McEstimate) {
        self.n += other.n;
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        self.loss.iter_mut().zip(&other.loss).for_each(|(x, y)| x.merge(y));
    }

    pub fn steps(&self) -> usize {
        self.loss.len()
    }

    pub fn dim(&self) -> usize {
        self.theta.first().map_or(0, |s| s.len())
    }

    /// Empirical moments at `step` in the analytic state layout. The
    /// covariance is not tracked and is reported as zero.
    pub fn moments_at(&self, step: usize) -> MomentState {
        let d = self.dim();
        let mut s = MomentState::zeros(d);
        for i in 0..d {
            s.set(
                i,
                DimMoments {
                    e_theta: self.theta[step][i].mean,
                    e_v: self.v[step][i].mean,
                    v_theta: self.theta[step][i].variance(),
                    v_v: self.v[step][i].variance(),
                    cov: 0.0,
                },
            );
        }
        s
    }
}

fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn simulate_block(
    problem: &QuadraticProblem,
    theta0: &[f64],
    v0: &[f64],
    schedule: &Schedule,
    range: std::ops::Range<usize>,
    seed: u64,
) -> McEstimate {
    let d = problem.dim();
    let (h, s2) = (problem.h(), problem.sigma2());
    let sd: Vec<f64> = s2.iter().map(|s| s.sqrt()).collect();
    let mut est = McEstimate::empty(schedule.len() + 1, d);
    let mut theta = vec![0.0; d];
    let mut v = vec![0.0; d];
    for k in range {
        let mut rng = trajectory_rng(seed, k);
        theta.copy_from_slice(theta0);
        v.copy_from_slice(v0);
        let mut record = |t: usize, theta: &[f64], v: &[f64]| {
            let mut loss = 0.0;
            for i in 0..d {
                est.theta[t][i].push(theta[i]);
                est.v[t][i].push(v[i]);
                loss += 0.5 * h[i] * (theta[i] * theta[i] + s2[i]);
            }
            est.loss[t].push(loss);
        };
        record(0, &theta, &v);
        for (t, step) in schedule.steps().iter().enumerate() {
            for i in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let g = h[i] * (theta[i] - sd[i] * z);
                v[i] = step.mu * v[i] - step.alpha * g;
                theta[i] += v[i];
            }
            record(t + 1, &theta, &v);
        }
        est.n += 1;
    }
    est
}

/// Runs `n_traj` independent trajectories of SGD with momentum from the
/// point `(θ₀, v₀)`. Trajectory `k` draws its noise from its own stream of
/// `seed`, so results do not depend on scheduling.
pub fn simulate(
    problem: &QuadraticProblem,
    theta0: &[f64],
    v0: &[f64],
    schedule: &Schedule,
    n_traj: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_dim(problem.dim(), theta0.len())?;
    check_dim(problem.dim(), v0.len())?;
    if n_traj < 2 {
        return Err(NqmError::arg("need at least two trajectories"));
    }
    let blocks: Vec<_> = (0..n_traj).step_by(BLOCK).map(|s| s..(s + BLOCK).min(n_traj)).collect();
    let parts: Vec<McEstimate> = blocks
        .into_par_iter()
        .map(|r| simulate_block(problem, theta0, v0, schedule, r, seed))
        .collect();
    let mut total = McEstimate::empty(schedule.len() + 1, problem.dim());
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    MeanTheta,
    MeanV,
    VarTheta,
    VarV,
    Loss,
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quantity::MeanTheta => "e_theta",
            Quantity::MeanV => "e_v",
            Quantity::VarTheta => "v_theta",
            Quantity::VarV => "v_v",
            Quantity::Loss => "loss",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub step: usize,
    pub quantity: Quantity,
    /// `None` for whole-problem quantities such as the loss.
    pub dim: Option<usize>,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub rows: Vec<ZScore>,
}

impl McReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,quantity,dim,z")?;
        for r in &self.rows {
            let dim = r.dim.map_or(String::new(), |d| d.to_string());
            writeln!(out, "{},{},{},{}", r.step, r.quantity, dim, r.z)?;
        }
        Ok(())
    }
}

/// `(empirical − analytic) / se`. A zero standard error only counts as
/// agreement when the values match to rounding.
fn z_score(empirical: f64, analytic: f64, se: f64) -> f64 {
    let diff = empirical - analytic;
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 * analytic.abs().max(1e-300) {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Analytic losses and states to compare a simulation against.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticTrace {
    pub losses: Vec<f64>,
    pub states: Vec<MomentState>,
}

impl AnalyticTrace {
    pub fn compute(problem: &QuadraticProblem, init: &MomentState, schedule: &Schedule) -> Result<Self> {
        Self::from_states(problem, rollout_states(problem, init, schedule)?)
    }

    pub fn from_states(problem: &QuadraticProblem, states: Vec<MomentState>) -> Result<Self> {
        let losses = states.iter().map(|s| problem.expected_loss(s)).collect::<Result<_>>()?;
        Ok(AnalyticTrace { losses, states })
    }
}

/// Z-scores of every tracked quantity at every step and dimension.
pub fn compare(est: &McEstimate, analytic: &AnalyticTrace) -> Result<McReport> {
    check_dim(est.steps(), analytic.states.len())?;
    check_dim(est.steps(), analytic.losses.len())?;
    let mut rows = Vec::new();
    for (t, state) in analytic.states.iter().enumerate() {
        check_dim(est.dim(), state.dim())?;
        for i in 0..state.dim() {
            let (th, v) = (&est.theta[t][i], &est.v[t][i]);
            let m = state.get(i);
            let mut push = |quantity, z| {
                rows.push(ZScore {
                    step: t,
                    quantity,
                    dim: Some(i),
                    z,
                })
            };
            push(Quantity::MeanTheta, z_score(th.mean, m.e_theta, th.mean_se()));
            push(Quantity::MeanV, z_score(v.mean, m.e_v, v.mean_se()));
            push(Quantity::VarTheta, z_score(th.variance(), m.v_theta, th.variance_se()));
            push(Quantity::VarV, z_score(v.variance(), m.v_v, v.variance_se()));
        }
        let l = &est.loss[t];
        rows.push(ZScore {
            step: t,
            quantity: Quantity::Loss,
            dim: None,
            z: z_score(l.mean, analytic.losses[t], l.mean_se()),
        });
    }
    Ok(McReport { rows })
}

/// Single-term corruptions of the moment recurrence, used to confirm that
/// the sampling oracle is sensitive enough to catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Drops `(αhσ)²` from `V[v⁺]`.
    DropNoise,
    /// Flips the sign of `2μ Cov` in `V[θ⁺]`.
    FlipCovariance,
    /// Drops `−2αh V[θ]` from `V[θ⁺]`.
    DropVarianceDecay,
}

impl Mutation {
    pub const ALL: [Mutation; 3] = [Mutation::DropNoise, Mutation::FlipCovariance, Mutation::DropVarianceDecay];

    fn step(self, m: &DimMoments, ah: f64, mu: f64, sigma2: f64) -> DimMoments {
        let e_v = mu * m.e_v - ah * m.e_theta;
        let noise = if self == Mutation::DropNoise { 0.0 } else { ah * ah * sigma2 };
        let v_v = mu * mu * m.v_v + ah * ah * m.v_theta - 2.0 * mu * ah * m.cov + noise;
        let decay = if self == Mutation::DropVarianceDecay { 0.0 } else { 2.0 * ah };
        let sign = if self == Mutation::FlipCovariance { -1.0 } else { 1.0 };
        DimMoments {
            e_theta: m.e_theta + e_v,
            e_v,
            v_theta: (1.0 - decay) * m.v_theta + v_v + sign * 2.0 * mu * m.cov,
            v_v,
            cov: mu * m.cov - ah * m.v_theta + v_v,
        }
    }
}

/// Analytic trace under a mutated recurrence, without variance checks.
pub fn mutated_trace(
    problem: &QuadraticProblem,
    init: &MomentState,
    schedule: &Schedule,
    mutation: Mutation,
) -> Result<AnalyticTrace> {
    check_dim(problem.dim(), init.dim())?;
    let (h, s2) = (problem.h(), problem.sigma2());
    let mut states = vec![init.clone()];
    for step in schedule.steps() {
        let prev = states.last().expect("non-empty");
        let mut next = prev.clone();
        for i in 0..problem.dim() {
            next.set(i, mutation.step(&prev.get(i), step.alpha * h[i], step.mu, s2[i]));
        }
        states.push(next);
    }
    AnalyticTrace::from_states(problem, states)
}

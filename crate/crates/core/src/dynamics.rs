//! Exact moment recurrence for SGD with momentum on the noisy quadratic.
//!
//! Every dimension evolves independently, so the distribution of iterates is
//! summarized by five numbers per dimension: `E[θ]`, `E[v]`, `V[θ]`, `V[v]` and
//! `Cov(θ, v)`. One step of momentum SGD maps these deterministically to the
//! next step's values.

use crate::error::{check_dim, NqmError, Result};
use crate::quad_model::QuadraticProblem;
use crate::schedules::Schedule;

/// Relative slack below zero that a computed variance may show before it is
/// treated as a divergence rather than rounding noise.
pub const VARIANCE_TOLERANCE: f64 = 1e-12;

/// Moments of a single coordinate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DimMoments {
    pub e_theta: f64,
    pub e_v: f64,
    pub v_theta: f64,
    pub v_v: f64,
    pub cov: f64,
}

impl DimMoments {
    /// Second moment `A(θ) = E[θ]² + V[θ]`.
    #[inline]
    pub fn a_theta(&self) -> f64 {
        self.e_theta * self.e_theta + self.v_theta
    }

    #[inline]
    pub fn a_v(&self) -> f64 {
        self.e_v * self.e_v + self.v_v
    }

    /// `E[θ v] = E[θ] E[v] + Cov(θ, v)`.
    #[inline]
    pub fn e_theta_v(&self) -> f64 {
        self.e_theta * self.e_v + self.cov
    }

    /// Advances one step with scaled learning rate `ah = α h`, momentum `mu`
    /// and noise variance `sigma2`.
    ///
    /// Velocity moments are updated first, then `V[θ]`, then the covariance,
    /// each using the freshly computed `V[v⁺]`.
    #[inline]
    pub fn step(&self, ah: f64, mu: f64, sigma2: f64) -> std::result::Result<DimMoments, String> {
        let e_v = mu * self.e_v - ah * self.e_theta;
        let e_theta = self.e_theta + e_v;

        let t_vv = mu * mu * self.v_v;
        let t_vt = ah * ah * self.v_theta;
        let t_c = 2.0 * mu * ah * self.cov;
        let t_n = ah * ah * sigma2;
        let v_v = clamp_variance(t_vv + t_vt - t_c + t_n, t_vv + t_vt + t_c.abs() + t_n, "V[v]")?;

        let t_c2 = 2.0 * mu * self.cov;
        let v_theta = clamp_variance(
            (1.0 - 2.0 * ah) * self.v_theta + v_v + t_c2,
            self.v_theta * (1.0 + (2.0 * ah).abs()) + v_v + t_c2.abs(),
            "V[theta]",
        )?;

        let cov = mu * self.cov - ah * self.v_theta + v_v;
        Ok(DimMoments {
            e_theta,
            e_v,
            v_theta,
            v_v,
            cov,
        })
    }
}

#[inline]
fn clamp_variance(value: f64, scale: f64, what: &str) -> std::result::Result<f64, String> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -VARIANCE_TOLERANCE * scale {
        Ok(0.0)
    } else if value.is_nan() {
        Err(format!("{what} is NaN"))
    } else {
        Err(format!("{what} = {value:e} is negative beyond rounding (scale {scale:e})"))
    }
}

/// Per-dimension sufficient statistics of the iterate distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub e_theta: Vec<f64>,
    pub e_v: Vec<f64>,
    pub v_theta: Vec<f64>,
    pub v_v: Vec<f64>,
    pub cov: Vec<f64>,
}

impl MomentState {
    pub fn zeros(dim: usize) -> Self {
        MomentState {
            e_theta: vec![0.0; dim],
            e_v: vec![0.0; dim],
            v_theta: vec![0.0; dim],
            v_v: vec![0.0; dim],
            cov: vec![0.0; dim],
        }
    }

    /// Point mass at `(θ, v)`: all variances and covariances zero.
    pub fn point_mass(theta: &[f64], v: &[f64]) -> Result<Self> {
        check_dim(theta.len(), v.len())?;
        let d = theta.len();
        Ok(MomentState {
            e_theta: theta.to_vec(),
            e_v: v.to_vec(),
            v_theta: vec![0.0; d],
            v_v: vec![0.0; d],
            cov: vec![0.0; d],
        })
    }

    pub fn dim(&self) -> usize {
        self.e_theta.len()
    }

    #[inline]
    pub fn get(&self, i: usize) -> DimMoments {
        DimMoments {
            e_theta: self.e_theta[i],
            e_v: self.e_v[i],
            v_theta: self.v_theta[i],
            v_v: self.v_v[i],
            cov: self.cov[i],
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, m: DimMoments) {
        self.e_theta[i] = m.e_theta;
        self.e_v[i] = m.e_v;
        self.v_theta[i] = m.v_theta;
        self.v_v[i] = m.v_v;
        self.cov[i] = m.cov;
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim(self.dim(), perm.len())?;
        let pick = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        Ok(MomentState {
            e_theta: pick(&self.e_theta),
            e_v: pick(&self.e_v),
            v_theta: pick(&self.v_theta),
            v_v: pick(&self.v_v),
            cov: pick(&self.cov),
        })
    }

    /// Checks nonnegative variances and Cauchy–Schwarz on the covariance.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for i in 0..self.dim() {
            let m = self.get(i);
            if !(m.v_theta >= 0.0 && m.v_v >= 0.0) {
                return Err(format!("dim {i}: negative variance {m:?}"));
            }
            let bound = m.v_theta * m.v_v;
            if m.cov * m.cov > bound * (1.0 + 1e-12) + 1e-300 {
                return Err(format!("dim {i}: Cov^2 = {} exceeds V[theta] V[v] = {bound}", m.cov * m.cov));
            }
        }
        Ok(())
    }
}

/// Initial moments: `E[θ] = e0`, `V[θ] = v0`, velocity at rest.
pub fn init_state(problem: &QuadraticProblem, e0: &[f64], v0: &[f64]) -> Result<MomentState> {
    check_dim(problem.dim(), e0.len())?;
    check_dim(problem.dim(), v0.len())?;
    if let Some((i, x)) = v0.iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
        return Err(NqmError::arg(format!("initial variance v0[{i}] = {x} must be >= 0")));
    }
    let d = problem.dim();
    Ok(MomentState {
        e_theta: e0.to_vec(),
        e_v: vec![0.0; d],
        v_theta: v0.to_vec(),
        v_v: vec![0.0; d],
        cov: vec![0.0; d],
    })
}

/// `E[θᵢ] = 1/√hᵢ`, `V[θ] = 0`: every dimension starts with the same excess loss.
pub fn default_init(problem: &QuadraticProblem) -> MomentState {
    let e0: Vec<f64> = problem.h().iter().map(|h| 1.0 / h.sqrt()).collect();
    let d = problem.dim();
    init_state(problem, &e0, &vec![0.0; d]).expect("default init is valid")
}

/// One step of the moment recurrence across all dimensions.
pub fn step_stats(
    state: &MomentState,
    alpha: f64,
    mu: f64,
    problem: &QuadraticProblem,
) -> Result<MomentState> {
    check_dim(problem.dim(), state.dim())?;
    if !(alpha >= 0.0 && alpha.is_finite() && mu.is_finite()) {
        return Err(NqmError::arg(format!("invalid hyperparameters alpha={alpha}, mu={mu}")));
    }
    let mut next = state.clone();
    step_in_place(&mut next, alpha, mu, problem)?;
    Ok(next)
}

pub(crate) fn step_in_place(
    state: &mut MomentState,
    alpha: f64,
    mu: f64,
    problem: &QuadraticProblem,
) -> Result<()> {
    let (h, s2) = (problem.h(), problem.sigma2());
    for i in 0..state.dim() {
        let m = state
            .get(i)
            .step(alpha * h[i], mu, s2[i])
            .map_err(|detail| NqmError::Instability { step: 0, dim: i, detail })?;
        state.set(i, m);
    }
    Ok(())
}

/// A named subset of coordinates whose loss is tracked separately.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexGroup {
    pub name: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLosses {
    pub name: String,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Expected loss after each step; index 0 is the initial state.
    pub losses: Vec<f64>,
    pub group_losses: Vec<GroupLosses>,
    pub final_state: MomentState,
}

impl RolloutResult {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("losses always has the initial entry")
    }
}

fn group_loss(problem: &QuadraticProblem, state: &MomentState, indices: &[usize]) -> f64 {
    indices
        .iter()
        .map(|&i| problem.dim_loss(i, state.e_theta[i], state.v_theta[i]))
        .sum()
}

/// Applies the recurrence along a schedule, recording the expected loss at
/// every step and, optionally, per-group partial losses.
pub fn rollout(
    problem: &QuadraticProblem,
    init: &MomentState,
    schedule: &Schedule,
    groups: Option<&[IndexGroup]>,
) -> Result<RolloutResult> {
    check_dim(problem.dim(), init.dim())?;
    let groups = groups.unwrap_or(&[]);
    for g in groups {
        if let Some(&i) = g.indices.iter().find(|&&i| i >= problem.dim()) {
            return Err(NqmError::arg(format!("group '{}' has out-of-range index {i}", g.name)));
        }
    }
    let mut state = init.clone();
    let mut losses = Vec::with_capacity(schedule.len() + 1);
    let mut group_losses: Vec<GroupLosses> = groups
        .iter()
        .map(|g| GroupLosses {
            name: g.name.clone(),
            losses: Vec::with_capacity(schedule.len() + 1),
        })
        .collect();
    let mut record = |state: &MomentState, losses: &mut Vec<f64>| -> Result<()> {
        losses.push(problem.expected_loss(state)?);
        for (g, out) in groups.iter().zip(group_losses.iter_mut()) {
            out.losses.push(group_loss(problem, state, &g.indices));
        }
        Ok(())
    };
    record(&state, &mut losses)?;
    for (t, step) in schedule.steps().iter().enumerate() {
        step_in_place(&mut state, step.alpha, step.mu, problem).map_err(|e| e.at_step(t))?;
        record(&state, &mut losses)?;
    }
    Ok(RolloutResult {
        losses,
        group_losses,
        final_state: state,
    })
}

/// Every intermediate state of a rollout, `T + 1` entries including `init`.
pub fn rollout_states(
    problem: &QuadraticProblem,
    init: &MomentState,
    schedule: &Schedule,
) -> Result<Vec<MomentState>> {
    check_dim(problem.dim(), init.dim())?;
    let mut states = Vec::with_capacity(schedule.len() + 1);
    states.push(init.clone());
    for (t, step) in schedule.steps().iter().enumerate() {
        let mut next = states[t].clone();
        step_in_place(&mut next, step.alpha, step.mu, problem).map_err(|e| e.at_step(t))?;
        states.push(next);
    }
    Ok(states)
}

/// Indices of the `k` largest and `k` smallest curvatures. Ties keep index order.
pub fn curvature_groups(problem: &QuadraticProblem, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || k > problem.dim() {
        return Err(NqmError::arg(format!(
            "group size k = {k} must be in 1..={}",
            problem.dim()
        )));
    }
    let h = problem.h();
    let mut order: Vec<usize> = (0..problem.dim()).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]));
    let top = order[..k].to_vec();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]));
    let bottom = order[..k].to_vec();
    Ok((top, bottom))
}

/// Named top-`k` / bottom-`k` curvature groups, as used for CSV output.
pub fn top_bottom_groups(problem: &QuadraticProblem, k: usize) -> Result<[IndexGroup; 2]> {
    let (top, bottom) = curvature_groups(problem, k)?;
    Ok([
        IndexGroup {
            name: format!("loss_top{k}"),
            indices: top,
        },
        IndexGroup {
            name: format!("loss_bottom{k}"),
            indices: bottom,
        },
    ])
}

/// Partial expected losses over the `k` highest- and `k` lowest-curvature directions.
pub fn grouped_loss(problem: &QuadraticProblem, state: &MomentState, k: usize) -> Result<(f64, f64)> {
    check_dim(problem.dim(), state.dim())?;
    let (top, bottom) = curvature_groups(problem, k)?;
    Ok((group_loss(problem, state, &top), group_loss(problem, state, &bottom)))
}

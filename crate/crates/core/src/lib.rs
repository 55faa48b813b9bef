//! Exact first and second moment dynamics of SGD with momentum on a noisy
//! quadratic, plus the schedules built on top of them: greedy one-step
//! optimal, horizon-optimized by gradient descent, and online adaptation by
//! stochastic meta-descent. A Monte Carlo simulator checks the moment
//! recurrence against sampled trajectories.

pub mod dynamics;
pub mod error;
pub mod meta_opt;
pub mod montecarlo;
pub mod quad_model;
pub mod schedules;
pub mod smd;

pub use dynamics::{default_init, init_state, rollout, step_stats, DimMoments, MomentState, RolloutResult};
pub use error::{NqmError, Result};
pub use meta_opt::{meta_grad, meta_loss, optimize_fixed, optimize_parametric, optimize_schedule, MetaConfig};
pub use quad_model::{make_spectrum, QuadraticProblem, SpectrumKind, SpectrumSpec};
pub use schedules::{greedy_schedule, greedy_step, HyperStep, InverseTimeDecay, Schedule};

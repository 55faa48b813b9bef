//! Run configuration: built-in defaults, optionally replaced by a preset,
//! then overridden by a TOML file, then by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nqm::dynamics::init_state;
use nqm::quad_model::{default_sigma2, load_spectrum, make_spectrum, SpectrumKind, SpectrumSpec};
use nqm::{MomentState, QuadraticProblem};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// h = 1, σ² = 1, E[θ₀] = 1, one step.
    Univariate,
    /// h = (1, 0.1), σ² = 1/h, E[θ₀] = 1/√h, 20 steps.
    Tiny2d,
    /// 1000 log-uniform curvatures, κ = 10⁴, σ² = 1/h, 250 steps.
    Paper1000,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseRule {
    /// σᵢ² = 1/hᵢ.
    Fisher,
    /// σᵢ² = 0.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitRule {
    /// E[θᵢ⁰] = 1/√hᵢ, so every dimension starts with the same loss.
    EqualLoss,
    /// E[θᵢ⁰] = 1.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    /// `log-uniform`, `uniform` or `custom`.
    pub spectrum: String,
    pub dim: usize,
    pub kappa: f64,
    /// Curvatures for a custom spectrum, one per line.
    pub spectrum_file: Option<PathBuf>,
    /// Inline curvatures for a custom spectrum.
    pub values: Option<Vec<f64>>,
    pub noise: NoiseRule,
    pub init: InitRule,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            spectrum: "log-uniform".into(),
            dim: 1000,
            kappa: 1e4,
            spectrum_file: None,
            values: None,
            noise: NoiseRule::Fisher,
            init: InitRule::EqualLoss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    InverseTime,
    Greedy,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub schedule: ScheduleKind,
    pub schedule_file: Option<PathBuf>,
    pub alpha: f64,
    pub mu: f64,
    pub alpha0: f64,
    pub beta: f64,
    pub time_constant: f64,
    /// Size of the top/bottom curvature groups; 50 for d ≥ 100, else ⌈d/2⌉.
    pub group_k: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            schedule: ScheduleKind::Constant,
            schedule_file: None,
            alpha: 0.1,
            mu: 0.9,
            alpha0: 0.1,
            beta: 1.0,
            time_constant: 5000.0,
            group_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub meta_steps: usize,
    pub meta_lr: f64,
    pub cap: bool,
    pub group_k: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            meta_steps: 500,
            meta_lr: 0.003,
            cap: true,
            group_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Largest learning rate; defaults to the SGD stability limit 2/max(h).
    pub alpha_max: Option<f64>,
    /// Smallest learning rate as a fraction of the largest.
    pub alpha_min_frac: f64,
    pub points: usize,
    pub horizons: Vec<usize>,
    pub mu: f64,
    pub tail_steps: usize,
    /// The last tail step uses `tail_factor · α`.
    pub tail_factor: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alpha_max: None,
            alpha_min_frac: 1e-3,
            points: 41,
            horizons: vec![10, 50, 100, 200],
            mu: 0.0,
            tail_steps: 50,
            tail_factor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    pub horizons: Vec<usize>,
    pub alpha0_min: f64,
    pub alpha0_max: f64,
    pub alpha0_points: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_points: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            horizons: vec![100, 1000, 5000],
            alpha0_min: 0.02,
            alpha0_max: 0.4,
            alpha0_points: 20,
            beta_min: 0.0,
            beta_max: 4.0,
            beta_points: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmdSection {
    pub lookahead: usize,
    pub meta_updates: usize,
    pub adapt_every: usize,
    pub meta_lr: f64,
    pub alpha_max: f64,
    pub steps: usize,
    pub alpha0: f64,
    pub mu0: f64,
    pub deterministic_lookahead: bool,
    /// Run both lookahead modes and report them side by side.
    pub compare_modes: bool,
}

impl Default for SmdSection {
    fn default() -> Self {
        let d = nqm::smd::SmdConfig::default();
        SmdSection {
            lookahead: d.lookahead,
            meta_updates: d.meta_updates,
            adapt_every: d.adapt_every,
            meta_lr: d.meta_lr,
            alpha_max: d.alpha_max,
            steps: 5000,
            alpha0: 0.1,
            mu0: 0.9,
            deterministic_lookahead: false,
            compare_modes: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationChoice {
    None,
    DropNoise,
    FlipCovariance,
    DropVarianceDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub trajectories: usize,
    pub alpha: f64,
    pub mu: f64,
    pub threshold: f64,
    /// Compare against a deliberately corrupted recurrence.
    pub mutation: MutationChoice,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            trajectories: 100_000,
            alpha: 0.5,
            mu: 0.5,
            threshold: 4.0,
            mutation: MutationChoice::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub out: PathBuf,
    pub horizon: usize,
    pub problem: ProblemConfig,
    pub rollout: RolloutConfig,
    pub compare: CompareConfig,
    pub sweep: SweepConfig,
    pub surface: SurfaceConfig,
    pub smd: SmdSection,
    pub mc: McConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            seed: 0,
            out: PathBuf::from("out"),
            horizon: 250,
            problem: ProblemConfig::default(),
            rollout: RolloutConfig::default(),
            compare: CompareConfig::default(),
            sweep: SweepConfig::default(),
            surface: SurfaceConfig::default(),
            smd: SmdSection::default(),
            mc: McConfig::default(),
        }
    }
}

/// Command-line overrides; `None` leaves the configured value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dim: Option<usize>,
    pub kappa: Option<f64>,
    pub spectrum: Option<String>,
    pub horizon: Option<usize>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = RunConfig {
            preset: Some(preset),
            ..RunConfig::default()
        };
        match preset {
            Preset::Univariate => {
                c.problem.spectrum = "custom".into();
                c.problem.values = Some(vec![1.0]);
                c.problem.dim = 1;
                c.problem.init = InitRule::Unit;
                c.horizon = 1;
                c.rollout.alpha = 0.5;
                c.rollout.mu = 0.0;
                c.mc.mu = 0.0;
            }
            Preset::Tiny2d => {
                c.problem.spectrum = "custom".into();
                c.problem.values = Some(vec![1.0, 0.1]);
                c.problem.dim = 2;
                c.horizon = 20;
            }
            Preset::Paper1000 => {}
        }
        c
    }

    /// Defaults, then the preset (from the flags, else from the file), then
    /// the file's own values, then the flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let file_preset = match table.get("preset") {
            Some(v) => Some(
                v.clone()
                    .try_into::<Preset>()
                    .map_err(|e| CliError::Config(format!("preset: {e}")))?,
            ),
            None => None,
        };
        let base = match flags.preset.or(file_preset) {
            Some(p) => RunConfig::preset(p),
            None => RunConfig::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, table);
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if flags.preset.is_some() {
            cfg.preset = flags.preset;
        }
        cfg.apply(flags)?;
        Ok(cfg)
    }

    fn apply(&mut self, flags: &Overrides) -> Result<(), CliError> {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        if let Some(d) = flags.dim {
            self.problem.dim = d;
        }
        if let Some(k) = flags.kappa {
            self.problem.kappa = k;
        }
        if let Some(h) = flags.horizon {
            self.horizon = h;
        }
        if let Some(s) = &flags.spectrum {
            // anything that is not a spectrum family is a file of curvatures
            match SpectrumKind::from_str(s) {
                Ok(SpectrumKind::Custom) => self.problem.spectrum = "custom".into(),
                Ok(_) => {
                    self.problem.spectrum = s.clone();
                    self.problem.values = None;
                    self.problem.spectrum_file = None;
                }
                Err(_) => {
                    self.problem.spectrum = "custom".into();
                    self.problem.values = None;
                    self.problem.spectrum_file = Some(PathBuf::from(s));
                }
            }
        }
        if flags.deterministic {
            self.problem.noise = NoiseRule::Zero;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn curvatures(&self) -> Result<Vec<f64>, CliError> {
        let p = &self.problem;
        let kind = SpectrumKind::from_str(&p.spectrum)?;
        let h = match kind {
            SpectrumKind::Custom => {
                let values = match (&p.values, &p.spectrum_file) {
                    (Some(v), None) => v.clone(),
                    (None, Some(path)) => load_spectrum(path)?,
                    (Some(_), Some(_)) => {
                        return Err(CliError::Config("give either values or spectrum_file, not both".into()))
                    }
                    (None, None) => return Err(CliError::Config("custom spectrum needs values or spectrum_file".into())),
                };
                make_spectrum(&SpectrumSpec::custom(values))?
            }
            SpectrumKind::LogUniform => make_spectrum(&SpectrumSpec::log_uniform(p.dim, p.kappa))?,
            SpectrumKind::Uniform => make_spectrum(&SpectrumSpec::uniform(p.dim, p.kappa))?,
        };
        Ok(h)
    }

    pub fn problem(&self) -> Result<QuadraticProblem, CliError> {
        let h = self.curvatures()?;
        let problem = match self.problem.noise {
            NoiseRule::Fisher => {
                let s2 = default_sigma2(&h)?;
                QuadraticProblem::new(h, s2)?
            }
            NoiseRule::Zero => QuadraticProblem::deterministic(h)?,
        };
        Ok(problem)
    }

    pub fn init_theta(&self, problem: &QuadraticProblem) -> Vec<f64> {
        match self.problem.init {
            InitRule::EqualLoss => problem.h().iter().map(|h| 1.0 / h.sqrt()).collect(),
            InitRule::Unit => vec![1.0; problem.dim()],
        }
    }

    pub fn init_state(&self, problem: &QuadraticProblem) -> Result<MomentState, CliError> {
        let d = problem.dim();
        Ok(init_state(problem, &self.init_theta(problem), &vec![0.0; d])?)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Default group size for top/bottom curvature losses.
pub fn default_group_k(dim: usize) -> usize {
    if dim >= 100 {
        50
    } else {
        dim.div_ceil(2)
    }
}

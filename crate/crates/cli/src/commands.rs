//! The six subcommands. Each one resolves a problem from the configuration,
//! runs, and returns its artifacts; writing them is left to [`run`].

use nqm::dynamics::top_bottom_groups;
use nqm::meta_opt::MetaConfig;
use nqm::montecarlo::{compare, mutated_trace, simulate, AnalyticTrace, Mutation};
use nqm::smd::{linspace, smd_deterministic_vs_stochastic, smd_online_run, surface_sample, write_surface_csv, SmdConfig, SmdTrace};
use nqm::{greedy_schedule, rollout, HyperStep, InverseTimeDecay, Schedule};

use crate::config::{default_group_k, MutationChoice, RunConfig, ScheduleKind};
use crate::experiments::{compare_schedules, horizon_sweep, log_grid, sweep_argmins};
use crate::output::{Artifacts, Cell, Csv};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Rollout,
    CompareSchedules,
    HorizonSweep,
    Surface,
    Smd,
    McCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Rollout => "rollout",
            Command::CompareSchedules => "compare-schedules",
            Command::HorizonSweep => "horizon-sweep",
            Command::Surface => "surface",
            Command::Smd => "smd",
            Command::McCheck => "mc-check",
        }
    }
}

/// Runs a command, writes its artifacts and returns them. An oracle failure
/// is reported only after the artifacts are on disk.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let (artifacts, verdict) = match cmd {
        Command::Rollout => (cmd_rollout(cfg)?, Ok(())),
        Command::CompareSchedules => (cmd_compare_schedules(cfg)?, Ok(())),
        Command::HorizonSweep => (cmd_horizon_sweep(cfg)?, Ok(())),
        Command::Surface => (cmd_surface(cfg)?, Ok(())),
        Command::Smd => (cmd_smd(cfg)?, Ok(())),
        Command::McCheck => cmd_mc_check(cfg)?,
    };
    artifacts.write(cmd.name(), cfg)?;
    verdict.map(|_| artifacts)
}

fn group_k(explicit: Option<usize>, dim: usize) -> usize {
    explicit.unwrap_or_else(|| default_group_k(dim))
}

fn schedule_csv(schedule: &Schedule) -> String {
    let mut buf = Vec::new();
    schedule.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

pub fn cmd_rollout(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let problem = cfg.problem()?;
    let init = cfg.init_state(&problem)?;
    let r = &cfg.rollout;
    let t = cfg.horizon;
    let schedule = match r.schedule {
        ScheduleKind::Constant => Schedule::new(vec![HyperStep::new(r.alpha, r.mu); t])?,
        ScheduleKind::InverseTime => InverseTimeDecay {
            alpha0: r.alpha0,
            beta: r.beta,
            mu: r.mu,
            time_constant: r.time_constant,
        }
        .materialize(t),
        ScheduleKind::Greedy if t == 0 => Schedule::empty(),
        ScheduleKind::Greedy => greedy_schedule(&problem, &init, t)?.0,
        ScheduleKind::File => {
            let path = r
                .schedule_file
                .as_ref()
                .ok_or_else(|| CliError::Config("rollout.schedule = \"file\" needs rollout.schedule_file".into()))?;
            Schedule::load(path)?
        }
    };
    let k = group_k(r.group_k, problem.dim());
    let groups = top_bottom_groups(&problem, k)?;
    let result = rollout(&problem, &init, &schedule, Some(&groups))?;

    let mut header = vec!["step".to_string(), "loss".into(), "alpha".into(), "mu".into()];
    header.extend(result.group_losses.iter().map(|g| g.name.clone()));
    let mut csv = Csv::new(&header);
    for (s, loss) in result.losses.iter().enumerate() {
        let step = schedule.steps().get(s);
        let mut row = vec![
            Cell::from(s),
            Cell::from(*loss),
            Cell::from(step.map(|h| h.alpha)),
            Cell::from(step.map(|h| h.mu)),
        ];
        row.extend(result.group_losses.iter().map(|g| Cell::from(g.losses[s])));
        csv.row(&row);
    }
    let mut a = Artifacts::default();
    a.add("rollout.csv", csv.into_string());
    a.add("schedule.csv", schedule_csv(&schedule));
    a.note("final_loss", result.final_loss());
    a.note("noise_floor", problem.noise_floor());
    Ok(a)
}

pub fn meta_config(cfg: &RunConfig) -> MetaConfig {
    MetaConfig {
        horizon: cfg.horizon,
        meta_lr: cfg.compare.meta_lr,
        meta_steps: cfg.compare.meta_steps,
        cap_enabled: cfg.compare.cap,
        ..MetaConfig::default()
    }
}

pub fn cmd_compare_schedules(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let problem = cfg.problem()?;
    let init = cfg.init_state(&problem)?;
    let k = group_k(cfg.compare.group_k, problem.dim());
    let c = compare_schedules(&problem, &init, &meta_config(cfg), k)?;

    let mut header = vec!["step".to_string()];
    for r in &c.runs {
        header.push(r.name.to_string());
        header.extend(r.result.group_losses.iter().map(|g| format!("{}_{}", r.name, g.name)));
    }
    let mut losses = Csv::new(&header);
    for s in 0..=cfg.horizon {
        let mut row = vec![Cell::from(s)];
        for r in &c.runs {
            row.push(Cell::from(r.result.losses[s]));
            row.extend(r.result.group_losses.iter().map(|g| Cell::from(g.losses[s])));
        }
        losses.row(&row);
    }

    let mut header = vec!["step".to_string()];
    for r in &c.runs {
        header.push(format!("{}_alpha", r.name));
        header.push(format!("{}_mu", r.name));
    }
    let mut schedules = Csv::new(&header);
    for s in 0..cfg.horizon {
        let mut row = vec![Cell::from(s)];
        for r in &c.runs {
            let h = r.schedule.steps()[s];
            row.push(Cell::from(h.alpha));
            row.push(Cell::from(h.mu));
        }
        schedules.row(&row);
    }

    let mut summary = Csv::new(&["schedule", "final_loss", "excess_loss", "loss_top", "loss_bottom"]);
    let mut a = Artifacts::default();
    for r in &c.runs {
        let last = |i: usize| *r.result.group_losses[i].losses.last().expect("non-empty");
        summary.row(&[
            Cell::from(r.name),
            Cell::from(c.final_loss(r.name)),
            Cell::from(c.excess(r.name)),
            Cell::from(last(0)),
            Cell::from(last(1)),
        ]);
        a.note(&format!("{}_final_loss", r.name), c.final_loss(r.name));
    }
    let (g, o) = (c.final_loss("greedy"), c.final_loss("optimized"));
    a.note("greedy_vs_optimized_rel_gap", (g - o).abs() / o);
    a.note("noise_floor", c.noise_floor);

    let mut trace = Csv::new(&["iteration", "optimized", "fixed"]);
    for i in 0..c.optimized_trace.len().max(c.fixed_trace.len()) {
        trace.row(&[
            Cell::from(i),
            Cell::from(c.optimized_trace.get(i).copied()),
            Cell::from(c.fixed_trace.get(i).copied()),
        ]);
    }
    a.add("compare_losses.csv", losses.into_string());
    a.add("compare_schedules.csv", schedules.into_string());
    a.add("compare_summary.csv", summary.into_string());
    a.add("meta_trace.csv", trace.into_string());
    Ok(a)
}

pub fn cmd_horizon_sweep(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let problem = cfg.problem()?;
    let init = cfg.init_state(&problem)?;
    let s = &cfg.sweep;
    let h_max = problem.h().iter().cloned().fold(0.0, f64::max);
    let hi = s.alpha_max.unwrap_or(2.0 / h_max);
    let alphas = log_grid(hi * s.alpha_min_frac, hi, s.points)?;
    let rows = horizon_sweep(&problem, &init, &alphas, &s.horizons, s.mu, s.tail_steps, s.tail_factor)?;

    let mut csv = Csv::new(&["k", "alpha", "loss", "loss_with_decay"]);
    for r in &rows {
        csv.row(&[Cell::from(r.k), Cell::from(r.alpha), Cell::from(r.plain), Cell::from(r.decayed)]);
    }
    let mut best = Csv::new(&["k", "argmin_alpha", "argmin_alpha_with_decay"]);
    for (k, plain, decayed) in sweep_argmins(&rows) {
        best.row(&[Cell::from(k), Cell::from(plain), Cell::from(decayed)]);
    }
    let mut a = Artifacts::default();
    a.add("sweep.csv", csv.into_string());
    a.add("sweep_argmin.csv", best.into_string());
    Ok(a)
}

pub fn cmd_surface(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let problem = cfg.problem()?;
    let init = cfg.init_state(&problem)?;
    let s = &cfg.surface;
    let alpha0 = linspace(s.alpha0_min, s.alpha0_max, s.alpha0_points)?;
    let beta = linspace(s.beta_min, s.beta_max, s.beta_points)?;
    let rows = surface_sample(&problem, &init, &s.horizons, &alpha0, &beta)?;
    let mut buf = Vec::new();
    write_surface_csv(&rows, &mut buf).expect("writing to memory");
    let mut a = Artifacts::default();
    a.add("surface.csv", String::from_utf8(buf).expect("utf-8"));
    Ok(a)
}

fn trace_csv(trace: &SmdTrace) -> String {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

pub fn smd_config(cfg: &RunConfig) -> SmdConfig {
    let s = &cfg.smd;
    SmdConfig {
        lookahead: s.lookahead,
        meta_updates: s.meta_updates,
        adapt_every: s.adapt_every,
        deterministic_lookahead: s.deterministic_lookahead,
        seed: cfg.seed,
        meta_lr: s.meta_lr,
        alpha_max: s.alpha_max,
    }
}

pub fn cmd_smd(cfg: &RunConfig) -> Result<Artifacts, CliError> {
    let problem = cfg.problem()?;
    let theta0 = cfg.init_theta(&problem);
    let v0 = vec![0.0; problem.dim()];
    let hyper0 = HyperStep::new(cfg.smd.alpha0, cfg.smd.mu0);
    let base = smd_config(cfg);
    let mut a = Artifacts::default();
    if cfg.smd.compare_modes {
        let stoch = SmdConfig {
            deterministic_lookahead: false,
            ..base.clone()
        };
        let det = SmdConfig {
            deterministic_lookahead: true,
            ..base
        };
        let cmp = smd_deterministic_vs_stochastic(&problem, &theta0, &v0, hyper0, [&stoch, &det], cfg.smd.steps)?;
        let mut summary = Csv::new(&["lookahead", "mean_alpha", "final_expected_loss"]);
        for (mode, det) in [("stochastic", false), ("deterministic", true)] {
            let run = cmp.by_mode(det);
            a.add(&format!("smd_{mode}.csv"), trace_csv(&run.trace));
            summary.row(&[Cell::from(mode), Cell::from(run.mean_alpha), Cell::from(run.final_expected_loss)]);
            a.note(&format!("{mode}_mean_alpha"), run.mean_alpha);
            a.note(&format!("{mode}_final_expected_loss"), run.final_expected_loss);
        }
        a.add("smd_summary.csv", summary.into_string());
    } else {
        let trace = smd_online_run(&problem, &theta0, &v0, hyper0, &base, cfg.smd.steps)?;
        a.note("mean_alpha", trace.mean_alpha());
        a.note("final_expected_loss", trace.final_expected_loss());
        a.add("smd.csv", trace_csv(&trace));
    }
    Ok(a)
}

/// Monte Carlo check of the analytic moments; the oracle verdict is the
/// second element.
pub fn cmd_mc_check(cfg: &RunConfig) -> Result<(Artifacts, Result<(), CliError>), CliError> {
    let problem = cfg.problem()?;
    let theta0 = cfg.init_theta(&problem);
    let v0 = vec![0.0; problem.dim()];
    let init = cfg.init_state(&problem)?;
    let schedule = Schedule::new(vec![HyperStep::new(cfg.mc.alpha, cfg.mc.mu); cfg.horizon])?;
    let analytic = match cfg.mc.mutation {
        MutationChoice::None => AnalyticTrace::compute(&problem, &init, &schedule)?,
        MutationChoice::DropNoise => mutated_trace(&problem, &init, &schedule, Mutation::DropNoise)?,
        MutationChoice::FlipCovariance => mutated_trace(&problem, &init, &schedule, Mutation::FlipCovariance)?,
        MutationChoice::DropVarianceDecay => mutated_trace(&problem, &init, &schedule, Mutation::DropVarianceDecay)?,
    };
    let est = simulate(&problem, &theta0, &v0, &schedule, cfg.mc.trajectories, cfg.seed)?;
    let report = compare(&est, &analytic)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).expect("writing to memory");
    let max_z = report.max_abs_z();
    let mut a = Artifacts::default();
    a.add("mc_z.csv", String::from_utf8(buf).expect("utf-8"));
    a.note("max_abs_z", max_z);
    a.note("threshold", cfg.mc.threshold);
    let verdict = if max_z < cfg.mc.threshold {
        Ok(())
    } else {
        Err(CliError::Oracle(format!("max |z| = {max_z:.3} is not below {}", cfg.mc.threshold)))
    };
    Ok((a, verdict))
}

//! Acceptance suite: one line per criterion, PASS or FAIL, with runtime.
//!
//! `ACCEPTANCE_ONLY=1,4,9 cargo test --test acceptance` runs a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nqm::meta_opt::{optimize_parametric, optimize_schedule, MetaConfig, Parameterization, MU_MAX};
use nqm::schedules::{univariate_a_min, univariate_lmin, univariate_optimal_alpha};
use nqm::smd::{lookahead_hypergrad, smd_deterministic_vs_stochastic, smd_online_run, Coordinates, LookaheadNoise, SmdConfig};
use nqm::{
    greedy_schedule, greedy_step, init_state, meta_grad, step_stats, HyperStep, MomentState, QuadraticProblem, Schedule,
};
use nqm_cli::commands::{cmd_mc_check, meta_config};
use nqm_cli::config::{MutationChoice, NoiseRule, Preset, RunConfig};
use nqm_cli::experiments::{compare_schedules, horizon_sweep, log_grid, sweep_argmins};
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

fn paper_problem(noise: NoiseRule) -> (RunConfig, QuadraticProblem, MomentState) {
    let mut cfg = RunConfig::preset(Preset::Paper1000);
    cfg.problem.noise = noise;
    let problem = cfg.problem().unwrap();
    let init = cfg.init_state(&problem).unwrap();
    (cfg, problem, init)
}

fn dynamics_oracle() -> Verdict {
    let mut cfg = RunConfig::preset(Preset::Tiny2d);
    let z = |cfg: &RunConfig| {
        let (a, _) = cmd_mc_check(cfg).unwrap();
        a.summary["max_abs_z"]
    };
    let clean = z(&cfg);
    let mut ok = clean < 4.0;
    let mut detail = format!("max|z| = {clean:.2} (< 4); mutations:");
    for (name, m) in [
        ("drop-noise", MutationChoice::DropNoise),
        ("flip-cov", MutationChoice::FlipCovariance),
        ("drop-decay", MutationChoice::DropVarianceDecay),
    ] {
        cfg.mc.mutation = m;
        let zm = z(&cfg);
        ok &= zm > 10.0;
        detail += &format!(" {name} {zm:.1}");
    }
    (ok, detail + " (> 10)")
}

fn greedy_closed_form() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst, mut checked, mut drawn) = (0.0f64, 0, 0);
    while checked < 50 {
        drawn += 1;
        let d = 1 + (drawn % 3);
        let (p, s) = common::random_state(&mut rng, d);
        let (a, m) = greedy_step(&s, &p).unwrap();
        if !common::interior_greedy(&p, a, m) {
            continue;
        }
        let (na, nm) = common::numeric_one_step_min(&p, &s);
        worst = worst.max((a - na).abs()).max((m - nm).abs());
        checked += 1;
    }
    (
        worst < 1e-4,
        format!("50 states (d <= 3, {drawn} drawn), max |closed form - golden section| = {worst:.2e} (< 1e-4)"),
    )
}

fn univariate_optimality() -> Verdict {
    let cases = [(1.0, 1.0, 1.0), (0.7, 1.3, 2.0), (0.05, 20.0, 40.0), (3.0, 0.2, 0.5)];
    let (mut loss_err, mut alpha_err, mut below) = (0.0f64, 0.0f64, false);
    for &(h, s2, a0) in &cases {
        for t in 1..=3 {
            let (alphas, l) = common::brute_force_univariate(h, s2, a0, t, 400);
            let want = univariate_lmin(a0, h, s2, t);
            loss_err = loss_err.max((l - want).abs() / want);
            below |= l < want * (1.0 - 1e-12);
            let mut a = a0;
            for alpha in alphas {
                let opt = univariate_optimal_alpha(a, h, s2);
                alpha_err = alpha_err.max((alpha - opt).abs() / opt);
                a = a * s2 / (a + s2);
            }
        }
    }
    let mut rec_err = 0.0f64;
    for &(h, s2, a0) in &cases {
        let p = QuadraticProblem::new(vec![h], vec![s2]).unwrap();
        let mut state = init_state(&p, &[f64::sqrt(a0)], &[0.0]).unwrap();
        for k in 1..=100 {
            let a = state.get(0).a_theta();
            state = step_stats(&state, univariate_optimal_alpha(a, h, s2), 0.0, &p).unwrap();
            let want = univariate_a_min(a0, s2, k);
            rec_err = rec_err.max((state.get(0).a_theta() - want).abs() / want);
        }
    }
    (
        loss_err < 1e-9 && alpha_err < 1e-4 && !below && rec_err < 1e-12,
        format!(
            "brute force vs closed form: loss rel err {loss_err:.1e}, rate rel err {alpha_err:.1e}, \
             beaten: {below}; A_k recursion rel err {rec_err:.1e} (< 1e-12)"
        ),
    )
}

fn meta_gradient() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let worst = (0..20)
        .map(|_| {
            let (p, s, sched) = common::random_instance(&mut rng);
            common::gradient_fd_error(&p, &s, &sched, 1e-5)
        })
        .fold(0.0, f64::max);
    (worst < 1e-5, format!("20 instances, max relative error {worst:.2e} (< 1e-5)"))
}

fn deterministic_equivalence() -> Verdict {
    let (_, problem, init) = paper_problem(NoiseRule::Zero);
    let (greedy, g) = greedy_schedule(&problem, &init, 250).unwrap();
    let cfg = MetaConfig {
        cap_enabled: false,
        meta_steps: 20_000,
        ..MetaConfig::default()
    };
    let opt = optimize_schedule(&problem, &init, &cfg).unwrap();
    let (gl, ol) = (g.final_loss(), opt.best_loss);
    let gap = (gl - ol).abs() / ol;
    let over = greedy.mus().iter().filter(|m| **m > MU_MAX).count();
    (
        gap <= 0.01,
        format!(
            "greedy {gl:.4e}, optimized {ol:.4e} ({} meta steps), gap {gap:.3} (<= 0.01); \
             greedy uses mu > {MU_MAX} on {over}/250 steps",
            cfg.meta_steps
        ),
    )
}

fn short_horizon_bias() -> Verdict {
    let (cfg, problem, init) = paper_problem(NoiseRule::Fisher);
    let c = compare_schedules(&problem, &init, &meta_config(&cfg), 50).unwrap();
    let (g, o, f) = (c.excess("greedy"), c.excess("optimized"), c.excess("fixed"));
    let ratio = o / g;
    (
        o < f && f < g && ratio <= 0.25,
        format!(
            "excess loss optimized {o:.2} < fixed {f:.2} < greedy {g:.2}: {}; ratio {ratio:.3} (<= 0.25); \
             raw losses {:.2} / {:.2} / {:.2}",
            o < f && f < g,
            c.final_loss("optimized"),
            c.final_loss("fixed"),
            c.final_loss("greedy"),
        ),
    )
}

fn decay_exponent() -> Verdict {
    let (_, problem, init) = paper_problem(NoiseRule::Fisher);
    let betas: Vec<f64> = [100, 1000, 5000]
        .iter()
        .map(|&t| {
            let cfg = MetaConfig {
                horizon: t,
                parameterization: Parameterization::InverseTimeDecay,
                ..MetaConfig::default()
            };
            optimize_parametric(&problem, &init, &cfg).unwrap().params.beta
        })
        .collect();
    (
        betas[0] > betas[1] && betas[1] > betas[2],
        format!("beta at T = 100, 1000, 5000: {:.3}, {:.3}, {:.3} (strictly decreasing)", betas[0], betas[1], betas[2]),
    )
}

fn horizon_sweep_property() -> Verdict {
    let mut ok = true;
    let mut detail = String::new();
    for noise in [NoiseRule::Fisher, NoiseRule::Zero] {
        let (cfg, problem, init) = paper_problem(noise);
        let s = &cfg.sweep;
        let hi = 2.0 / problem.h().iter().cloned().fold(0.0, f64::max);
        let alphas = log_grid(hi * s.alpha_min_frac, hi, s.points).unwrap();
        let rows = horizon_sweep(&problem, &init, &alphas, &s.horizons, s.mu, s.tail_steps, s.tail_factor).unwrap();
        let mins = sweep_argmins(&rows);
        let pairs: Vec<String> = mins.iter().map(|(k, p, d)| format!("k={k}: {p:.3}/{d:.3}")).collect();
        if noise == NoiseRule::Fisher {
            let le = mins.iter().all(|(_, p, d)| p <= d);
            let strict = mins.iter().any(|(_, p, d)| p < d);
            ok &= le && strict;
            detail += &format!("stochastic [{}] <=: {le}, strict somewhere: {strict}; ", pairs.join(", "));
        } else {
            let eq = mins.iter().all(|(_, p, d)| p == d);
            ok &= eq;
            detail += &format!("deterministic [{}] coincide: {eq}", pairs.join(", "));
        }
    }
    (ok, detail)
}

fn smd_checks() -> Verdict {
    // unbiasedness of the one-step hypergradient
    let h = nqm::make_spectrum(&nqm::SpectrumSpec::log_uniform(20, 100.0)).unwrap();
    let p = QuadraticProblem::with_default_noise(h.clone()).unwrap();
    let theta0: Vec<f64> = h.iter().map(|x| 1.0 / x.sqrt()).collect();
    let v0: Vec<f64> = theta0.iter().map(|t| -0.1 * t).collect();
    let hyper = HyperStep::new(0.1, 0.9);
    let (_, exact) = meta_grad(
        &p,
        &MomentState::point_mass(&theta0, &v0).unwrap(),
        &Schedule::new(vec![hyper]).unwrap(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let n = 100_000;
    let mut sums = [[0.0f64; 2]; 2];
    for _ in 0..n {
        let g = lookahead_hypergrad(&p, &theta0, &v0, hyper, 1, LookaheadNoise::Fresh(&mut rng), Coordinates::Log).unwrap();
        for j in 0..2 {
            sums[j][0] += g[j];
            sums[j][1] += g[j] * g[j];
        }
    }
    let mut z = [0.0; 2];
    for j in 0..2 {
        let mean = sums[j][0] / n as f64;
        let var = (sums[j][1] / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
        z[j] = (mean - exact[j]) / (var / n as f64).sqrt();
    }
    let unbiased = z.iter().all(|z| z.abs() < 4.0);

    // one-step SMD against the closed form on a deterministic problem
    let pd = QuadraticProblem::deterministic(h.clone()).unwrap();
    let cfg = SmdConfig {
        lookahead: 1,
        meta_updates: 5000,
        adapt_every: 1,
        deterministic_lookahead: true,
        meta_lr: 0.01,
        alpha_max: 1e3,
        ..SmdConfig::default()
    };
    let steps = 30;
    let zero = vec![0.0; h.len()];
    let trace = smd_online_run(&pd, &theta0, &zero, HyperStep::new(0.1, 0.5), &cfg, steps).unwrap();
    let (mut th, mut v) = (theta0.clone(), zero);
    let (mut worst, mut compared) = (0.0f64, 0);
    for (t, round) in trace.rounds.iter().enumerate() {
        let (ga, gm) = greedy_step(&MomentState::point_mass(&th, &v).unwrap(), &pd).unwrap();
        // the first round has no velocity, so momentum is free there
        if t > 0 && (0.0..=MU_MAX).contains(&gm) && ga <= cfg.alpha_max {
            worst = worst.max((round.alpha - ga).abs() / ga).max((round.mu - gm).abs() / gm.max(1e-12));
            compared += 1;
        }
        for i in 0..th.len() {
            v[i] = round.mu * v[i] - round.alpha * h[i] * th[i];
            th[i] += v[i];
        }
    }
    let tracks = compared >= 15 && worst <= 0.05;
    (
        unbiased && tracks,
        format!(
            "hypergradient z = ({:.2}, {:.2}) over 1e5 samples (< 4); SMD vs closed form worst rel diff {worst:.1e} \
             over {compared}/{steps} rounds with the closed form inside mu <= {MU_MAX} (<= 0.05)",
            z[0], z[1]
        ),
    )
}

fn smd_pathology() -> Verdict {
    let (_, problem, init) = paper_problem(NoiseRule::Fisher);
    let theta0 = init.e_theta.clone();
    let v0 = vec![0.0; problem.dim()];
    let stoch = SmdConfig::default();
    let det = SmdConfig {
        deterministic_lookahead: true,
        ..SmdConfig::default()
    };
    let cmp = smd_deterministic_vs_stochastic(&problem, &theta0, &v0, HyperStep::new(0.1, 0.9), [&stoch, &det], 5000)
        .unwrap();
    let cfg = MetaConfig {
        horizon: 5000,
        ..MetaConfig::default()
    };
    let opt = optimize_schedule(&problem, &init, &cfg).unwrap();
    let floor = problem.noise_floor();
    let s = cmp.by_mode(false);
    let d = cmp.by_mode(true);
    let ratio = (s.final_expected_loss - floor) / (opt.best_loss - floor);
    (
        ratio >= 5.0 && d.mean_alpha > s.mean_alpha,
        format!(
            "SMD excess {:.2} vs optimized excess {:.2}: ratio {ratio:.2} (>= 5); mean alpha deterministic \
             lookahead {:.4} > stochastic {:.4}",
            s.final_expected_loss - floor,
            opt.best_loss - floor,
            d.mean_alpha,
            s.mean_alpha
        ),
    )
}

fn invariant_suite() -> Verdict {
    let cases = 256;
    let mut failures = Vec::new();
    for (name, prop) in common::PROPERTIES {
        let mut runner = TestRunner::new_with_rng(
            Config {
                failure_persistence: None,
                ..Config::with_cases(cases)
            },
            proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
        );
        if let Err(e) = runner.run(&common::case(), |c| prop(&c)) {
            failures.push(format!("{name}: {e}"));
        }
    }
    (
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} properties x {cases} cases", common::PROPERTIES.len())
        } else {
            failures.join("; ")
        },
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "dynamics oracle", budget: secs(30), run: dynamics_oracle },
        Criterion { id: 2, name: "greedy closed form", budget: secs(10), run: greedy_closed_form },
        Criterion { id: 3, name: "univariate optimality", budget: secs(60), run: univariate_optimality },
        Criterion { id: 4, name: "meta-gradient", budget: secs(30), run: meta_gradient },
        Criterion { id: 5, name: "deterministic equivalence", budget: secs(600), run: deterministic_equivalence },
        Criterion { id: 6, name: "short-horizon bias", budget: secs(1800), run: short_horizon_bias },
        Criterion { id: 7, name: "decay exponent vs horizon", budget: secs(1200), run: decay_exponent },
        Criterion { id: 8, name: "horizon sweep", budget: secs(600), run: horizon_sweep_property },
        Criterion { id: 9, name: "SMD unbiasedness and tracking", budget: secs(300), run: smd_checks },
        Criterion { id: 10, name: "online SMD pathology", budget: secs(1800), run: smd_pathology },
        Criterion { id: 11, name: "invariant suite", budget: secs(300), run: invariant_suite },
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = ok && in_time;
        println!(
            "criterion {:>2} {} {}: {detail} [{:.1} s / {} s{}]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
        if !pass {
            failed.push(c.id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use nqm_cli::{Command, Overrides, Preset, RunConfig};

/// Experiments on the noisy quadratic model: exact SGD-with-momentum
/// dynamics, greedy and horizon-optimized schedules, stochastic meta-descent.
#[derive(Parser, Debug)]
#[command(name = "nqm", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    #[command(flatten)]
    global: Global,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Roll out one schedule and write per-step losses.
    Rollout,
    /// Greedy vs. optimized vs. best fixed schedule.
    CompareSchedules,
    /// Fixed-α losses with and without a decay tail across horizons.
    HorizonSweep,
    /// Meta-objective of inverse time decay over an (α₀, β) grid.
    Surface,
    /// Online stochastic meta-descent.
    Smd,
    /// Monte Carlo check of the analytic moments.
    McCheck,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file (keys listed under --help).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base random seed [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Problem dimension for generated spectra [default: 1000].
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Condition number of generated spectra [default: 10000].
    #[arg(long, global = true)]
    kappa: Option<f64>,
    /// `log-uniform`, `uniform`, or a file with one curvature per line [default: log-uniform].
    #[arg(long, global = true, value_name = "KIND|PATH")]
    spectrum: Option<String>,
    /// Number of optimization steps [default: 250].
    #[arg(long, global = true, value_name = "T")]
    horizon: Option<usize>,
    /// Start from a built-in problem instead of the defaults.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Drop the gradient noise (σ² = 0).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Rollout => Command::Rollout,
            Sub::CompareSchedules => Command::CompareSchedules,
            Sub::HorizonSweep => Command::HorizonSweep,
            Sub::Surface => Command::Surface,
            Sub::Smd => Command::Smd,
            Sub::McCheck => Command::McCheck,
        }
    }
}

fn main() -> ExitCode {
    let defaults = format!(
        "Values are resolved as: built-in defaults, then --preset (or `preset` in the file), \
         then the --config file, then the other flags.\n\nConfiguration keys and defaults:\n\n{}",
        RunConfig::default().to_toml()
    );
    let matches = match Cli::command().after_long_help(defaults).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let g = cli.global;
    let flags = Overrides {
        preset: g.preset,
        seed: g.seed,
        out: g.out,
        dim: g.dim,
        kappa: g.kappa,
        spectrum: g.spectrum,
        horizon: g.horizon,
        deterministic: g.deterministic,
    };
    let result = RunConfig::resolve(g.config.as_deref(), &flags).and_then(|cfg| {
        if g.dump_config {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        let cmd = Command::from(cli.command);
        let artifacts = nqm_cli::run(cmd, &cfg)?;
        for (key, value) in &artifacts.summary {
            println!("{key} = {value:?}");
        }
        println!("wrote {} files to {}", artifacts.files.len() + 1, cfg.out.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

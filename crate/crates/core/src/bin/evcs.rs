//! Command-line front end: run one scheduling method, compare all of
//! them, or just validate a configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use evcs::admm::{run, run_without_bes};
use evcs::baselines::{evaluate_fixed_schedule, uncontrolled_schedule};
use evcs::config::RunConfig;
use evcs::metrics::{emit, energy_accounting, feeder_peak, voltage_report};
use evcs::result::ScheduleResult;
use evcs::scenario::Instance;
use evcs::subproblems::{solve_centralized, NET_TOL};

#[derive(Parser)]
#[command(
    name = "evcs",
    about = "Hierarchical distributed EV charging scheduling on radial grids",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Controlled charging with battery storage (two-level ADMM).
    Cc1,
    /// Controlled charging without battery storage.
    Cc2,
    /// Uncontrolled plug-and-charge baseline.
    Ucc,
    /// Centralized conic solve of the same relaxed problem.
    Central,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scheduling method and write reports.
    Run {
        /// TOML run configuration.
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory for CSV reports and the summary.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        #[arg(short, long, value_enum, default_value_t = Method::Cc1)]
        method: Method,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the worker-thread count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run ucc, cc2, and cc1 on the same instance and write a combined report.
    Compare {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Also solve the centralized reference (slow on larger grids).
        #[arg(long)]
        central: bool,
    },
    /// Check that a configuration loads and builds a feasible instance.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, out, method, seed, workers } => {
            let (cfg, inst) = load(&config, seed, workers)?;
            let res = solve(&inst, &cfg, method)?;
            emit(&out, &inst, &[&res])?;
            print_summary(&inst, &res)?;
            println!("reports written to {}", out.display());
            Ok(if res.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Compare { config, out, seed, workers, central } => {
            let (cfg, inst) = load(&config, seed, workers)?;
            let mut methods = vec![Method::Ucc, Method::Cc2, Method::Cc1];
            if central {
                methods.push(Method::Central);
            }
            let mut results = Vec::new();
            for m in methods {
                let res = solve(&inst, &cfg, m)?;
                print_summary(&inst, &res)?;
                results.push(res);
            }
            let refs: Vec<&ScheduleResult> = results.iter().collect();
            emit(&out, &inst, &refs)?;
            println!("reports written to {}", out.display());
            let all_converged = results.iter().all(|r| r.converged);
            Ok(if all_converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            let inst = cfg.build()?;
            inst.validate()?;
            let n_ev: usize = inst.nodes.iter().map(|n| n.sessions.len()).sum();
            let n_bes = inst.nodes.iter().filter(|n| n.bes.is_some()).count();
            println!(
                "ok: {} buses, {} lines, {} aggregators, {} EVs, {} batteries, {} steps of {} h",
                inst.net.n_buses(),
                inst.net.lines.len(),
                inst.nodes.len(),
                n_ev,
                n_bes,
                inst.horizon.n,
                inst.horizon.step_hours
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load(
    config: &PathBuf,
    seed: Option<u64>,
    workers: Option<usize>,
) -> anyhow::Result<(RunConfig, Instance)> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    if let Some(w) = workers {
        cfg.admm.workers = Some(w);
    }
    let inst = cfg.build()?;
    Ok((cfg, inst))
}

fn solve(inst: &Instance, cfg: &RunConfig, method: Method) -> anyhow::Result<ScheduleResult> {
    Ok(match method {
        Method::Ucc => uncontrolled_schedule(inst)?,
        Method::Cc1 => run(inst, &cfg.admm)?,
        Method::Cc2 => run_without_bes(inst, &cfg.admm)?,
        Method::Central => {
            let sol = solve_centralized(inst, NET_TOL)?;
            evaluate_fixed_schedule(
                inst,
                "central",
                &sol.schedules,
                Some(sol.state),
                true,
                0,
                Vec::new(),
            )?
        }
    })
}

fn print_summary(inst: &Instance, res: &ScheduleResult) -> anyhow::Result<()> {
    let vr = voltage_report(&inst.net, &res.evaluated_state);
    println!(
        "{:8} objective {:9.4} $  cost {:9.4} $  losses {:8.3} kWh  peak {:8.1} kVA  \
         v [{:.4}, {:.4}]  violations {}  {}",
        res.method,
        res.objective,
        res.cost_usd,
        res.loss_kwh,
        feeder_peak(&inst.net, &res.evaluated_state),
        vr.min.0,
        vr.max.0,
        vr.violations.len(),
        if res.converged {
            format!("converged in {} iterations", res.outer_iters)
        } else {
            format!("NOT converged after {} iterations", res.outer_iters)
        }
    );
    let acct = energy_accounting(inst, res)?;
    if acct > 1e-6 {
        eprintln!("warning: energy balance residual {acct:.2e} for {}", res.method);
    }
    Ok(())
}

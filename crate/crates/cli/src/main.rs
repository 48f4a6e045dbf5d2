use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use kkflow_core::energy::ode_model;
use kkflow_core::evolution::{snapshot_text, write_time_series};
use kkflow_core::verify::{gauge_test, integrator_convergence, operator_convergence, OrderStudy};
use kkflow_core::{run, Error, Result, Scenario};

#[derive(Parser)]
#[command(name = "kkflow", version, about = "Rescaled Kaluza-Klein Einstein flow around the Milne background")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a scenario and write the time series, solver log and final snapshot.
    Run(RunArgs),
    /// Gauge-fix a random exact Faraday field on a flat torus and report the residuals.
    GaugeTest(GaugeArgs),
    /// Integrate the damped model ODE and report its energy decay.
    OdeDemo(OdeArgs),
    /// Observed convergence orders of the difference operators and the integrator.
    Convergence(ConvergenceArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Energy orders as `s` or `s,k`.
    #[arg(long)]
    order: Option<String>,
    /// Points per axis.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_backreaction: bool,
    /// Write a state snapshot every this many steps.
    #[arg(long)]
    snapshot_every: Option<usize>,
}

#[derive(Args)]
struct GaugeArgs {
    #[arg(long, default_value_t = 16)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use `F = 0`.
    #[arg(long)]
    zero: bool,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args)]
struct OdeArgs {
    #[arg(long, default_value_t = 2.0 / 9.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0 / 9.0)]
    lambda0: f64,
    #[arg(long, default_value_t = 10.0)]
    t_final: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// CSV path for the trajectory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long, default_value_t = 3)]
    levels: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&Error::Usage(e.kind().to_string()), json!({}));
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::GaugeTest(a) => cmd_gauge_test(a),
        Command::OdeDemo(a) => cmd_ode_demo(a),
        Command::Convergence(a) => cmd_convergence(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, ctx)) => fail(&e, ctx),
    }
}

/// Structured diagnostic on stderr, exit code from the error class.
fn fail(e: &Error, context: serde_json::Value) -> ExitCode {
    let diag = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code(), "context": context });
    eprintln!("{}", diag);
    ExitCode::from(e.exit_code() as u8)
}

type CmdResult = std::result::Result<(), (Error, serde_json::Value)>;

fn plain<T>(r: Result<T>) -> std::result::Result<T, (Error, serde_json::Value)> {
    r.map_err(|e| (e, json!({})))
}

fn parse_orders(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("--order expects 's' or 's,k', got '{}'", s));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        [a] => Ok((num(a)?, num(a)?)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(bad()),
    }
}

fn load_scenario(a: &RunArgs) -> Result<Scenario> {
    let text = fs::read_to_string(&a.scenario).map_err(|e| Error::Io(format!("{}: {}", a.scenario.display(), e)))?;
    let mut sc = Scenario::parse(&text)?;
    if let Some(n) = a.grid {
        sc.dims = [n; 3];
    }
    if let Some(dt) = a.dt {
        sc.dt = Some(dt);
    }
    if let Some(t) = a.t_final {
        sc.t_final = t;
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if a.no_backreaction {
        sc.no_backreaction = true;
    }
    if let Some(k) = a.snapshot_every {
        sc.snapshot_every = Some(k);
    }
    if let Some(o) = &a.order {
        sc.orders = parse_orders(o)?;
    }
    if let Some(out) = &a.out {
        sc.out_dir = Some(out.clone());
    }
    sc.validate()?;
    Ok(sc)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {}", path.display(), e)))
}

fn cmd_run(a: RunArgs) -> CmdResult {
    let sc = plain(load_scenario(&a))?;
    let out = sc.out_dir.clone().unwrap_or_else(|| PathBuf::from("kkflow-out"));
    plain(fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {}", out.display(), e))))?;
    let pr = plain(sc.prepare())?;
    let mut snap = |step: usize, s: &kkflow_core::FieldState| write(&out.join(format!("snapshot_{:06}.txt", step)), &snapshot_text(s));
    let outcome = plain(run(&pr.chart, pr.state, pr.evolution, &pr.run, &mut snap))?;
    let file = fs::File::create(out.join("timeseries.csv")).map_err(Error::from);
    plain(file.and_then(|f| write_time_series(f, &outcome.rows)))?;
    plain(write(&out.join("solver_log.csv"), &outcome.log.to_csv()))?;
    plain(write(&out.join("final_snapshot.txt"), &snapshot_text(&outcome.final_state)))?;
    let last = outcome.rows.last();
    let summary = json!({
        "preset": sc.preset.name(),
        "steps": outcome.steps,
        "dt": pr.run.dt,
        "t": outcome.final_state.t,
        "E_tot": last.map(|r| r.e_tot),
        "ham_res_Linf": last.map(|r| r.ham_linf),
        "out": out.display().to_string(),
    });
    match outcome.error {
        None => {
            println!("{}", summary);
            Ok(())
        }
        Some(e) => Err((e, summary)),
    }
}

fn cmd_gauge_test(a: GaugeArgs) -> CmdResult {
    let r = plain(gauge_test(a.grid, a.seed, if a.zero { 0.0 } else { 1.0 }))?;
    let report = json!({
        "grid": r.n,
        "seed": r.seed,
        "div_l2": r.div_l2,
        "harmonic_projection": r.harmonic,
        "psi_integral": r.psi_mean,
        "dA_minus_F_linf": r.curl_error,
        "max_A": r.max_omega,
    });
    println!("{}", report);
    if r.within(a.tol) {
        Ok(())
    } else {
        Err((Error::Invariant(format!("gauge residual above {:e}", a.tol)), report))
    }
}

fn cmd_ode_demo(a: OdeArgs) -> CmdResult {
    let r = plain(ode_model(a.lambda, a.lambda0, 1.0, 0.0, a.t_final, a.dt))?;
    if let Some(path) = &a.out {
        plain(write(path, &r.to_csv()))?;
    }
    let rate = r.rate.map(|f| f.exponent);
    let drift = r.samples.iter().map(|s| (s.e - s.e_exact).abs() / s.e_exact).fold(0.0, f64::max);
    println!("{}", json!({ "lambda": a.lambda, "lambda0": a.lambda0, "rate": rate, "max_relative_energy_error": drift }));
    println!("measured rate {:.6}", rate.unwrap_or(f64::NAN));
    Ok(())
}

fn study_json(s: &OrderStudy) -> serde_json::Value {
    json!({ "name": s.name, "steps": s.steps, "errors": s.errors, "orders": s.orders })
}

fn cmd_convergence(a: ConvergenceArgs) -> CmdResult {
    let ops = plain(operator_convergence(a.levels))?;
    let rk = plain(integrator_convergence(a.levels))?;
    for s in ops.iter().chain(std::iter::once(&rk)) {
        let orders: Vec<String> = s.orders.iter().map(|o| format!("{:.3}", o)).collect();
        println!("{:<8} orders {}", s.name, orders.join(" "));
    }
    println!("{}", json!({ "operators": ops.iter().map(study_json).collect::<Vec<_>>(), "integrator": study_json(&rk) }));
    Ok(())
}

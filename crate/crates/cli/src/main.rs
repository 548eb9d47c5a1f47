//! `geval`: batch front door for the lattice evaluation engine.

mod claim;
mod config;
mod payoff;
mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use geval_core::bsde::{self, Dividend};
use geval_core::drivers::builtin;
use geval_core::evaluation::{axiom_suite, Evaluation};
use geval_core::martingale::{classify, doob_meyer_direct, doob_meyer_penalized};
use geval_core::representation::{
    probe_constant_z, reconstruct_driver, solve_bsde_under_e, ProbeGrid, RecoveryMethod,
};
use geval_core::{AdaptedProcess, Driver, GevalError, Lattice, RandomVariable};

use config::{DividendConfig, MethodConfig, ScenarioConfig};
use report::Report;

#[derive(Parser)]
#[command(name = "geval", version, about = "Nonlinear evaluations on discrete Brownian lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; `GEVAL_THREADS` also applies, the flag wins.
    #[arg(long)]
    threads: Option<usize>,
    /// Optional CSV dump of the solved value process.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the BSDE for a driver, claim, and optional dividend stream.
    Solve(Common),
    /// Apply the evaluation E_{s,N} to the configured claim.
    Evaluate(Common),
    /// Run the randomized axiom suite against the configured driver.
    VerifyAxioms(Common),
    /// Classify and decompose the induced value process.
    Decompose(Common),
    /// Reconstruct the driver on a probe grid.
    Recover(Common),
    /// Solve the BSDE driven by the evaluation itself (Picard iteration).
    Fixpoint(Common),
    /// Probe the evaluation with constant-z test claims.
    Probe(Common),
    /// Combined summary: solve, classify, and a small axiom sample.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Evaluate(_) => "evaluate",
            Command::VerifyAxioms(_) => "verify-axioms",
            Command::Decompose(_) => "decompose",
            Command::Recover(_) => "recover",
            Command::Fixpoint(_) => "fixpoint",
            Command::Probe(_) => "probe",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Solve(c)
            | Command::Evaluate(c)
            | Command::VerifyAxioms(c)
            | Command::Decompose(c)
            | Command::Recover(c)
            | Command::Fixpoint(c)
            | Command::Probe(c)
            | Command::Report(c) => c,
        }
    }
}

#[derive(Debug)]
enum CliError {
    /// Exit 2: bad configuration or I/O.
    Config(String),
    /// Exit 1: a checked property failed.
    Property(String),
    /// Exit 3: numerical failure inside the engine.
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Property(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Property(m) | CliError::Numerical(m) => m,
        }
    }
}

fn engine(e: GevalError) -> CliError {
    match e {
        GevalError::UnknownBuiltin(_)
        | GevalError::BadParams(_)
        | GevalError::InvalidSpec(_)
        | GevalError::CapacityExceeded { .. }
        | GevalError::DegenerateGrid
        | GevalError::BadPartition(_)
        | GevalError::TimeOrder { .. }
        | GevalError::Unsupported(_) => CliError::Config(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

struct Scenario {
    cfg: ScenarioConfig,
    hash: String,
    seed: Option<u64>,
}

fn load(common: &Common) -> Result<Scenario, CliError> {
    let raw = fs::read(&common.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", common.config.display())))?;
    let cfg: ScenarioConfig =
        serde_json::from_slice(&raw).map_err(|e| CliError::Config(e.to_string()))?;
    let threads = common
        .threads
        .or_else(|| std::env::var("GEVAL_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = common.seed.or(cfg.seed);
    Ok(Scenario { cfg, hash: report::config_hash(&raw), seed })
}

impl Scenario {
    fn lattice(&self) -> Result<Lattice, CliError> {
        self.cfg.build_lattice().map_err(CliError::Config)
    }

    fn driver(&self) -> Result<Driver, CliError> {
        let dc = self
            .cfg
            .driver
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs a `driver` section".into()))?;
        builtin(&dc.name, &dc.params).map_err(engine)
    }

    fn evaluation(&self, lat: &Lattice) -> Result<Evaluation, CliError> {
        Evaluation::from_driver(lat, self.driver()?, self.cfg.solver()).map_err(engine)
    }

    fn claim(&self, lat: &Lattice) -> Result<RandomVariable, CliError> {
        let text = self
            .cfg
            .claim
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs a `claim` expression".into()))?;
        let expr = payoff::parse_payoff(text).map_err(|e| CliError::Config(e.to_string()))?;
        claim::terminal_claim(lat, &expr, &self.cfg.market).map_err(CliError::Config)
    }

    fn dividend_increments(&self, lat: &Lattice) -> Result<Vec<RandomVariable>, CliError> {
        match &self.cfg.dividend {
            None | Some(DividendConfig::Zero) => Ok(Vec::new()),
            Some(DividendConfig::ConstantIncrements { value }) => {
                Ok((0..lat.steps()).map(|k| lat.constant(k, *value)).collect())
            }
        }
    }

    fn seed_required(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| {
            CliError::Config("randomized commands need a seed (config or --seed)".into())
        })
    }
}

/// Value process induced by the (possibly dividend-lifted) evaluation.
fn value_chain(
    e: &Evaluation,
    incs: &[RandomVariable],
    x: &RandomVariable,
) -> Result<AdaptedProcess, CliError> {
    let lifted;
    let op = if incs.is_empty() {
        e
    } else {
        lifted = e.lift_with_increments(incs).map_err(engine)?;
        &lifted
    };
    let mut layers = vec![x.clone()];
    for k in (0..x.time).rev() {
        let stepped = op.one_step(k, &layers[0].values).map_err(engine)?;
        layers.insert(0, RandomVariable::new(k, stepped));
    }
    Ok(AdaptedProcess(layers))
}

fn write_csv(common: &Common, y: &AdaptedProcess) -> Result<(), CliError> {
    if let Some(path) = &common.csv {
        fs::write(path, report::process_csv(y)).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cmd: &Command) -> Result<(), CliError> {
    let common = cmd.common();
    let sc = load(common)?;
    let lat = sc.lattice()?;
    let body: Value = match cmd {
        Command::Solve(_) => {
            let g = sc.driver()?;
            let x = sc.claim(&lat)?;
            let incs = sc.dividend_increments(&lat)?;
            let dividend =
                if incs.is_empty() { Dividend::Zero } else { Dividend::Increments(&incs) };
            let sol = bsde::solve_bsde(&lat, &g, None, &x, dividend, &sc.cfg.solver())
                .map_err(engine)?;
            write_csv(common, &sol.y)?;
            json!({
                "y0": sol.y.at(0).values[0],
                "terminal_nodes": x.values.len(),
                "diagnostics": sol.diagnostics,
            })
        }
        Command::Evaluate(_) => {
            let e = sc.evaluation(&lat)?;
            let x = sc.claim(&lat)?;
            let s = sc.cfg.times.s.unwrap_or(0);
            let v = e.apply(s, x.time, &x).map_err(engine)?;
            json!({ "time_index": s, "values": v.values })
        }
        Command::VerifyAxioms(_) => {
            let e = sc.evaluation(&lat)?;
            let samples = sc.cfg.samples.unwrap_or(100);
            let seed = sc.seed_required()?;
            let rep = axiom_suite(&e, samples, seed).map_err(engine)?;
            let ok = rep.all_pass;
            let body = serde_json::to_value(&rep).unwrap();
            if !ok {
                let report =
                    Report::new(cmd.name(), sc.seed, sc.hash.clone(), body);
                report.write(common.out.as_deref()).map_err(CliError::Config)?;
                return Err(CliError::Property("axiom suite reported a violation".into()));
            }
            body
        }
        Command::Decompose(_) => {
            let e = sc.evaluation(&lat)?;
            let x = sc.claim(&lat)?;
            let incs = sc.dividend_increments(&lat)?;
            let y = value_chain(&e, &incs, &x)?;
            write_csv(common, &y)?;
            let class = classify(&e, &y).map_err(engine)?;
            let direct = doob_meyer_direct(&e, &y).map_err(engine)?;
            let penalized = match &sc.cfg.schedule {
                Some(schedule) => {
                    Some(doob_meyer_penalized(&e, &y, schedule).map_err(engine)?)
                }
                None => None,
            };
            json!({
                "classification": class,
                "direct": direct,
                "penalized": penalized,
            })
        }
        Command::Recover(_) => {
            let e = sc.evaluation(&lat)?;
            let gc = sc
                .cfg
                .grid
                .as_ref()
                .ok_or_else(|| CliError::Config("recover needs a `grid` section".into()))?;
            let grid = ProbeGrid {
                t_indices: gc.t_indices.clone(),
                y_values: gc.y_values.clone(),
                z_values: gc.z_values.clone(),
            };
            let method = match sc.cfg.method {
                MethodConfig::OneStep => RecoveryMethod::OneStep,
                MethodConfig::TestProcess => RecoveryMethod::TestProcess,
            };
            let rec = reconstruct_driver(&e, &grid, method).map_err(engine)?;
            serde_json::to_value(&rec).unwrap()
        }
        Command::Fixpoint(_) => {
            let e = sc.evaluation(&lat)?;
            let x = sc.claim(&lat)?;
            let gen = sc
                .cfg
                .generator
                .as_ref()
                .ok_or_else(|| CliError::Config("fixpoint needs a `generator` section".into()))?;
            let tol = sc.cfg.tolerance.unwrap_or(1e-10);
            let f = |_k: usize, _node: usize, y: f64| gen.eval(y);
            let (y, trace) =
                solve_bsde_under_e(&e, &f, gen.lipschitz(), &x, tol, 10_000).map_err(engine)?;
            write_csv(common, &y)?;
            json!({ "y0": y.at(0).values[0], "trace": trace })
        }
        Command::Probe(_) => {
            let e = sc.evaluation(&lat)?;
            let t = sc.cfg.times.t.unwrap_or(0);
            let z_bar = sc
                .cfg
                .z_bar
                .clone()
                .ok_or_else(|| CliError::Config("probe needs a `z_bar` list".into()))?;
            let probe = probe_constant_z(&e, t, &z_bar).map_err(engine)?;
            serde_json::to_value(&probe).unwrap()
        }
        Command::Report(_) => {
            let e = sc.evaluation(&lat)?;
            let g = sc.driver()?;
            let x = sc.claim(&lat)?;
            let sol = bsde::solve_bsde(&lat, &g, None, &x, Dividend::Zero, &sc.cfg.solver())
                .map_err(engine)?;
            write_csv(common, &sol.y)?;
            let class = classify(&e, &sol.y).map_err(engine)?;
            let axioms = match sc.seed {
                Some(seed) => Some(
                    axiom_suite(&e, sc.cfg.samples.unwrap_or(20), seed).map_err(engine)?,
                ),
                None => None,
            };
            if let Some(rep) = &axioms {
                if !rep.all_pass {
                    return Err(CliError::Property("axiom sample reported a violation".into()));
                }
            }
            json!({
                "y0": sol.y.at(0).values[0],
                "classification": class,
                "diagnostics": sol.diagnostics,
                "axioms": axioms,
            })
        }
    };
    let report = Report::new(cmd.name(), sc.seed, sc.hash, body);
    report.write(common.out.as_deref()).map_err(CliError::Config)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("geval: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

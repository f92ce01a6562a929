//! Command-line front end: `enumerate`, `verify`, `simulate`, `app`.
//!
//! Every run echoes its manifest to `<out>/manifest.json`, writes CSV reports
//! and prints a one-line summary. The exit status is zero exactly when all
//! residual/tolerance contracts of the command hold, so runs can gate CI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::applications::{location_predictor, markov_gap, thiele_reserve, LocationSpec};
use crate::document::{DocError, ModelDocument, ProcessSide};
use crate::engine::Session;
use crate::measures::{sojourn_drift, sojourn_process, SojournSpec};
use crate::model::{InformationState, PathRecord, Side};
use crate::montecarlo::{
    estimate_projection, partition_sum_diagnostic, simulate_paths, SimulationConfig,
};
use crate::representation::{
    max_abs_residual, verify_representation_process_with_drift, verify_representation_xi,
    DriftSide, RepresentationReport,
};

#[derive(Parser, Debug)]
#[command(name = "imr", version, about = "Scenario-tree engine for point processes with expiring information")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AppChoice {
    Thiele,
    Markov,
    Location,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Enumerate every path with its probability and information states.
    Enumerate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the two-sided decomposition for a named target.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `xi:<payoff>` or `process:<process>` from the model document.
        #[arg(long)]
        target: String,
        /// Residual tolerance; a breach fails the run.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Simulate paths, estimate projections and emit partition diagnostics.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-paths", default_value_t = 10_000)]
        n_paths: usize,
        /// Refinement levels for the partition diagnostic.
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Payoff to estimate; defaults to the document's first payoff.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Run one of the bundled applications.
    App {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        app: AppChoice,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    model: String,
    out: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    app: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    App(#[from] crate::applications::AppError),
    #[error(transparent)]
    Repr(#[from] crate::representation::ReprError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("target must be `xi:<payoff>` or `process:<name>`, got {0:?}")]
    BadTarget(String),
    #[error("document defines no payoffs; nothing to estimate")]
    NoPayoffs,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn prepare_out(dir: &Path, manifest: &RunManifest<'_>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.display().to_string(),
        source,
    })?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_file(dir, "manifest.json", &text)
}

fn state_key(compiled: &crate::model::CompiledModel, state: &InformationState) -> String {
    state.display(compiled.marks())
}

/// `path_id,t,lhs,drift,if_integral,ib_integral,residual` rows of a ledger.
pub fn report_csv(reports: &[RepresentationReport]) -> String {
    let mut out = String::from("path_id,t,lhs,drift,if_integral,ib_integral,residual\n");
    for report in reports {
        for row in &report.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                report.path_id,
                row.t,
                row.lhs,
                row.drift,
                row.forward_integral,
                row.backward_integral,
                row.residual
            );
        }
    }
    out
}

/// The full path table with probabilities, events and per-piece times.
pub fn paths_csv(compiled: &crate::model::CompiledModel) -> String {
    let pieces = compiled.model().max_pieces();
    let mut out = String::from("path_id,probability,events");
    for p in 1..=pieces {
        let _ = write!(out, ",t_in_{p},t_del_{p},mark_{p}");
    }
    out.push('\n');
    let grid = compiled.grid();
    for path in compiled.paths() {
        let events = path
            .events
            .iter()
            .enumerate()
            .map(|(i, e)| format!("{}:{}", i + 1, e.encode(compiled.marks())))
            .collect::<Vec<_>>()
            .join("|");
        let _ = write!(out, "{},{},{}", path.id, path.probability, events);
        for p in 1..=pieces {
            let t_in = path
                .innovation_idx(p)
                .map_or("inf".to_string(), |k| grid[k].to_string());
            let t_del = path
                .deletion_idx(p)
                .map_or("inf".to_string(), |k| grid[k].to_string());
            let mark = path
                .mark(p)
                .map_or("-".to_string(), |m| compiled.marks()[m as usize].clone());
            let _ = write!(out, ",{t_in},{t_del},{mark}");
        }
        out.push('\n');
    }
    out
}

/// Per-(path, time, side) information states.
pub fn states_csv(compiled: &crate::model::CompiledModel) -> String {
    let mut out = String::from("path_id,t,side,active_set,marks\n");
    let grid = compiled.grid();
    for path in compiled.paths() {
        for k in 0..=compiled.steps() {
            for side in [Side::Right, Side::Left] {
                if side == Side::Left && k == 0 {
                    continue;
                }
                let state = compiled.state(path.state_at(k, side));
                let set = state
                    .active
                    .iter()
                    .map(u8::to_string)
                    .collect::<Vec<_>>()
                    .join("+");
                let marks = state
                    .marks
                    .iter()
                    .map(|&m| compiled.marks()[m as usize].clone())
                    .collect::<Vec<_>>()
                    .join("+");
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    path.id,
                    grid[k],
                    if side == Side::Right { "right" } else { "left" },
                    if set.is_empty() { "-".to_string() } else { set },
                    if marks.is_empty() { "-".to_string() } else { marks },
                );
            }
        }
    }
    out
}

/// `t,state_key,estimate,stderr,n_cell` rows; absent cells carry empty fields.
pub fn estimates_csv(
    compiled: &crate::model::CompiledModel,
    estimates: &crate::montecarlo::ProjectionEstimates,
) -> String {
    let mut out = String::from("t,state_key,estimate,stderr,n_cell\n");
    let grid = compiled.grid();
    for ((k, state), cell) in &estimates.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            grid[*k],
            state_key(compiled, compiled.state(*state)),
            cell.estimate,
            if cell.stderr.is_finite() {
                cell.stderr.to_string()
            } else {
                "inf".to_string()
            },
            cell.n
        );
    }
    for (k, state) in &estimates.absent {
        let _ = writeln!(
            out,
            "{},{},,,0",
            grid[*k],
            state_key(compiled, compiled.state(*state)),
        );
    }
    out
}

/// Entry point used by the binary: parse, dispatch, report.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(passed) => {
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

pub fn dispatch(command: &Command) -> Result<bool, CliError> {
    match command {
        Command::Enumerate { model, out } => cmd_enumerate(model, out),
        Command::Verify {
            model,
            out,
            target,
            tol,
        } => cmd_verify(model, out, target, *tol),
        Command::Simulate {
            model,
            out,
            seed,
            n_paths,
            levels,
            target,
            tol,
        } => cmd_simulate(model, out, *seed, *n_paths, *levels, target.as_deref(), *tol),
        Command::App {
            model,
            out,
            app,
            tol,
        } => cmd_app(model, out, *app, *tol),
    }
}

pub fn cmd_enumerate(model_path: &Path, out: &Path) -> Result<bool, CliError> {
    let document = ModelDocument::from_file(model_path)?;
    let compiled = document.compile()?;
    prepare_out(
        out,
        &RunManifest {
            command: "enumerate",
            model: model_path.display().to_string(),
            out: out.display().to_string(),
            seed: None,
            n_paths: None,
            tol: None,
            app: None,
            target: None,
            levels: None,
        },
    )?;

    write_file(out, "paths.csv", &paths_csv(&compiled))?;
    write_file(out, "states.csv", &states_csv(&compiled))?;

    let total: f64 = compiled.paths().iter().map(|p| p.probability).sum();
    println!(
        "enumerated {} paths over {} grid times, total probability {total}",
        compiled.paths().len(),
        compiled.grid().len()
    );
    Ok(true)
}

pub fn cmd_verify(
    model_path: &Path,
    out: &Path,
    target: &str,
    tol: f64,
) -> Result<bool, CliError> {
    let document = ModelDocument::from_file(model_path)?;
    let compiled = document.compile()?;
    prepare_out(
        out,
        &RunManifest {
            command: "verify",
            model: model_path.display().to_string(),
            out: out.display().to_string(),
            seed: None,
            n_paths: None,
            tol: Some(tol),
            app: None,
            target: Some(target.to_string()),
            levels: None,
        },
    )?;
    let session = Session::new(&compiled);

    let reports = if let Some(name) = target.strip_prefix("xi:") {
        let values = document.payoff_values(&compiled, name)?;
        let xi = session.register_values(values);
        verify_representation_xi(&session, xi)
    } else if let Some(name) = target.strip_prefix("process:") {
        let (sojourn, side) = document.process_spec(&compiled, name)?;
        let spec = SojournSpec {
            h: &|m: &InformationState, s: f64, p: &PathRecord| sojourn.eval(m, s, p),
            gamma: sojourn.gamma.clone(),
        };
        let (state_side, drift_side) = match side {
            ProcessSide::Forward => (Side::Left, DriftSide::Forward),
            ProcessSide::Backward => (Side::Right, DriftSide::Backward),
        };
        let values = sojourn_process(&session, &spec, state_side);
        let drift = sojourn_drift(&session, &spec, state_side);
        let process: Vec<_> = (0..=compiled.steps())
            .map(|k| session.register_values(values.iter().map(|v| v[k]).collect()))
            .collect();
        verify_representation_process_with_drift(&session, &process, drift_side, &drift)?
    } else {
        return Err(CliError::BadTarget(target.to_string()));
    };

    write_file(out, "representation_report.csv", &report_csv(&reports))?;
    let max_residual = max_abs_residual(&reports);
    let passed = max_residual <= tol;
    println!(
        "verify {target}: max residual {max_residual:e} (tolerance {tol:e}) -> {}",
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(passed)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    model_path: &Path,
    out: &Path,
    seed: u64,
    n_paths: usize,
    levels: usize,
    target: Option<&str>,
    tol: f64,
) -> Result<bool, CliError> {
    let document = ModelDocument::from_file(model_path)?;
    let compiled = document.compile()?;
    prepare_out(
        out,
        &RunManifest {
            command: "simulate",
            model: model_path.display().to_string(),
            out: out.display().to_string(),
            seed: Some(seed),
            n_paths: Some(n_paths),
            tol: Some(tol),
            app: None,
            target: target.map(str::to_string),
            levels: Some(levels),
        },
    )?;

    let target_name = match target {
        Some(name) => name.to_string(),
        None => document
            .payoffs
            .keys()
            .next()
            .cloned()
            .ok_or(CliError::NoPayoffs)?,
    };
    let values = document.payoff_values(&compiled, &target_name)?;
    let config = SimulationConfig { seed, n_paths };
    let draws = simulate_paths(&compiled, &config);
    let estimates = estimate_projection(&compiled, &draws, &values);

    write_file(out, "estimates.csv", &estimates_csv(&compiled, &estimates))?;

    // exact partition diagnostics of the compensated total counting process
    let session = Session::new(&compiled);
    let mut passed = true;
    for (side, file) in [
        (DriftSide::Forward, "diagnostics.csv"),
        (DriftSide::Backward, "diagnostics_backward.csv"),
    ] {
        let process: Vec<_> = (0..=compiled.steps())
            .map(|k| {
                session.register(|p: &PathRecord| {
                    let mu = crate::measures::counting_atoms(p);
                    let comp = match side {
                        DriftSide::Forward => {
                            crate::measures::forward_compensator_atoms(&session, p)
                        }
                        DriftSide::Backward => {
                            crate::measures::backward_compensator_atoms(&session, p)
                        }
                    };
                    let m: f64 = mu
                        .atoms()
                        .iter()
                        .filter(|a| a.key.time_idx <= k)
                        .map(|a| a.mass)
                        .sum();
                    let c: f64 = comp
                        .atoms()
                        .iter()
                        .filter(|a| a.key.time_idx <= k)
                        .map(|a| a.mass)
                        .sum();
                    m - c
                })
            })
            .collect();
        let diag = partition_sum_diagnostic(&session, &process, side, levels);
        let mut csv = String::from("level,mesh,sum\n");
        for level in &diag.levels {
            let worst = level
                .per_path_sums
                .iter()
                .fold(0.0f64, |acc, s| acc.max(s.abs()));
            let _ = writeln!(csv, "{},{},{}", level.level, level.mesh, worst);
        }
        write_file(out, file, &csv)?;
        let finest = diag
            .finest()
            .per_path_sums
            .iter()
            .fold(0.0f64, |acc, s| acc.max(s.abs()));
        if finest > tol {
            passed = false;
        }
    }

    println!(
        "simulate: {} draws, {} visited cells, {} absent cells, diagnostics {}",
        n_paths,
        estimates.cells.len(),
        estimates.absent.len(),
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(passed)
}

pub fn cmd_app(
    model_path: &Path,
    out: &Path,
    app: AppChoice,
    tol: f64,
) -> Result<bool, CliError> {
    let document = ModelDocument::from_file(model_path)?;
    prepare_out(
        out,
        &RunManifest {
            command: "app",
            model: model_path.display().to_string(),
            out: out.display().to_string(),
            seed: None,
            n_paths: None,
            tol: Some(tol),
            app: Some(format!("{app:?}").to_lowercase()),
            target: None,
            levels: None,
        },
    )?;

    match app {
        AppChoice::Thiele => {
            let compiled = document.compile()?;
            let session = Session::new(&compiled);
            let contract = document.thiele_contract(compiled.grid())?;
            let output = thiele_reserve(&session, &contract)?;
            let mut csv = String::from(
                "path_id,t,reserve,delta_b,interest_drift,if_increment,ib_increment,residual\n",
            );
            for (path, rows) in compiled.paths().iter().zip(&output.rows) {
                for row in rows {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{}",
                        path.id,
                        row.t,
                        row.reserve,
                        row.benefit_increment,
                        row.interest_drift,
                        row.forward_increment,
                        row.backward_increment,
                        row.residual
                    );
                }
            }
            write_file(out, "thiele_reserve.csv", &csv)?;

            let mut risk_csv = String::from("path_id,t,index_set,marks,value\n");
            for row in &output.sum_at_risk {
                let set = row
                    .key
                    .index_set
                    .iter()
                    .map(u8::to_string)
                    .collect::<Vec<_>>()
                    .join("+");
                let marks = row
                    .key
                    .marks
                    .iter()
                    .map(|&m| compiled.marks()[m as usize].clone())
                    .collect::<Vec<_>>()
                    .join("+");
                let _ = writeln!(
                    risk_csv,
                    "{},{},{},{},{}",
                    row.path_id,
                    compiled.grid()[row.key.time_idx],
                    set,
                    marks,
                    row.value
                );
            }
            write_file(out, "thiele_sum_at_risk.csv", &risk_csv)?;
            let passed = output.max_residual <= tol;
            println!(
                "thiele: max residual {:e} (tolerance {tol:e}) -> {}",
                output.max_residual,
                if passed { "PASS" } else { "FAIL" }
            );
            Ok(passed)
        }
        AppChoice::Markov => {
            let compiled = document.compile()?;
            let session = Session::new(&compiled);
            let spec = document.markov_spec()?;
            let output = markov_gap(&session, &spec)?;
            let mut csv = String::from(
                "path_id,t,proj_full_history,proj_state,gap,ib_increment,ib_running_abs\n",
            );
            for row in &output.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    row.path_id,
                    row.t,
                    row.full_history,
                    row.state_only,
                    row.gap,
                    row.backward_increment,
                    row.backward_running_abs
                );
            }
            write_file(out, "markov_gap.csv", &csv)?;
            let residual = max_abs_residual(&output.reports);
            let passed = residual <= tol;
            println!(
                "markov: max gap {:e}, decomposition residual {residual:e} -> {}",
                output.max_gap,
                if passed { "PASS" } else { "FAIL" }
            );
            Ok(passed)
        }
        AppChoice::Location => {
            let (doc, retention, lag) = document.location_parts()?;
            let sweep: Vec<f64> = doc.sweep.clone();
            let area_names = doc.area.clone();
            let has_walk = doc.walk.is_some();

            // model: walk-built when a walk block is present, otherwise the
            // document's own transition table
            let compiled = if has_walk {
                document.location_walk_model(retention)?.compile()?
            } else {
                document.compile()?
            };
            let session = Session::new(&compiled);
            let area = document.area_marks(compiled.marks(), &area_names)?;
            let output = location_predictor(
                &session,
                &LocationSpec {
                    retention_steps: retention,
                    lag_steps: lag,
                    area: area.clone(),
                },
            )?;
            let mut csv = String::from(
                "path_id,t,predictor,drift_increment,if_increment,ib_increment,residual\n",
            );
            for row in &output.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    row.path_id,
                    row.t,
                    row.predictor,
                    row.drift_increment,
                    row.forward_increment,
                    row.backward_increment,
                    row.residual
                );
            }
            write_file(out, "location_predictor.csv", &csv)?;

            let mut sweep_csv =
                String::from("delta,max_abs_ib_increment,mean_total_abs_ib,max_residual\n");
            let mut sweep_pass = true;
            if has_walk && !sweep.is_empty() {
                let walk_doc = doc.walk.as_ref().expect("checked");
                let walk = crate::applications::WalkSpec {
                    kernel: walk_doc.kernel.clone(),
                    initial: walk_doc.initial.clone(),
                    measure_prob: walk_doc.measure_prob,
                };
                let retentions: Result<Vec<usize>, DocError> = sweep
                    .iter()
                    .map(|&d| document.duration_steps(d, "sweep delta"))
                    .collect();
                let area_ids =
                    document.area_marks(&walk_doc.locations, &area_names)?;
                let rows = crate::applications::location_sweep(
                    compiled.grid().to_vec(),
                    walk_doc.locations.clone(),
                    &walk,
                    lag,
                    area_ids,
                    &retentions?,
                )?;
                for row in &rows {
                    let _ = writeln!(
                        sweep_csv,
                        "{},{},{},{}",
                        compiled.grid()[1] * row.retention_steps as f64,
                        row.max_abs_backward,
                        row.mean_total_abs_backward,
                        row.max_residual
                    );
                    if row.max_residual > tol {
                        sweep_pass = false;
                    }
                }
            }
            write_file(out, "location_delta_sweep.csv", &sweep_csv)?;
            let passed = output.max_residual <= tol && sweep_pass;
            println!(
                "location: max residual {:e}, averaging effect (mean total |ib|) {:e} -> {}",
                output.max_residual,
                output.mean_total_abs_backward,
                if passed { "PASS" } else { "FAIL" }
            );
            Ok(passed)
        }
    }
}

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::montecarlo::{simulate_parallel, simulate_sequential};
use crate::optimize::{pbpo_multistart, probe_range, IDENTICAL_PROBES};
use crate::sequential::{tree_risk, verify_secret_ballot, PolicyTree, SecretBallotReport, MAX_TREE_AGENTS};
use crate::team::{bayes_risk, identical_risk, TeamProblem};

use super::config::{ExperimentConfig, SimMode};
use super::{CliError, EXIT_CHECK_FAILED, EXIT_OK};

const RESOLVED_CONFIG: &str = "resolved_config.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_resolved(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    write_json(&out.join(RESOLVED_CONFIG), config)
}

fn guard_size(cells: &[TeamProblem]) -> Result<(), CliError> {
    match cells.iter().find(|p| p.n > MAX_TREE_AGENTS) {
        Some(p) => Err(crate::Error::TooLarge {
            n: p.n,
            max: MAX_TREE_AGENTS,
        }
        .into()),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct CurvePoint {
    threshold: f64,
    risk: f64,
}

pub(super) fn optimize(config: &ExperimentConfig, out: &Path) -> Result<u8, CliError> {
    let problem = config.require_problem()?;
    let multi = pbpo_multistart(problem, config.pbpo_inits, config.seed, 0)?;
    let identical = crate::optimize::optimize_identical_threshold(problem)?;
    let best = multi.best();
    write_resolved(config, out)?;
    write_json(
        &out.join("optimize.json"),
        &json!({
            "config": config,
            "lambda_star": identical.thresholds[0],
            "risk": identical.risk,
            "residual": identical.stationarity_residual,
            "residual_degenerate": identical.residual_degenerate,
            "on_boundary": identical.on_boundary,
            "converged": identical.converged,
            "pbpo_thresholds": best.thresholds,
            "pbpo_risk": best.risk,
            "identical_gap": multi.identical_gap,
            "pbpo_spread": multi.spread,
            "pbpo_risk_gap": multi.risk_gap,
        }),
    )?;
    if config.risk_curve {
        let (lo, hi) = probe_range(&problem.model, problem.p0);
        let step = (hi - lo) / (IDENTICAL_PROBES - 1) as f64;
        let points = (0..IDENTICAL_PROBES).map(|i| {
            let threshold = lo + step * i as f64;
            CurvePoint {
                threshold,
                risk: identical_risk(problem, threshold),
            }
        });
        write_csv(&out.join("risk_curve.csv"), points)?;
    }
    log::info!("lambda* = {} with risk {}", identical.thresholds[0], identical.risk);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    history: &'a str,
    rho_star: f64,
    lambda_star: f64,
    deviation: f64,
}

#[derive(Serialize)]
struct CellHistoryRow<'a> {
    family: &'static str,
    model: String,
    n: usize,
    l: usize,
    p0: f64,
    c10: f64,
    c01: f64,
    history: &'a str,
    rho_star: f64,
    lambda_star: f64,
    deviation: f64,
}

fn summary(problem: &TeamProblem, report: &SecretBallotReport) -> serde_json::Value {
    json!({
        "problem": problem,
        "lambda_star": report.lambda_star,
        "max_deviation": report.max_deviation,
        "root_deviation": report.root_deviation,
        "risk_seq": report.risk_seq,
        "risk_par": report.risk_par,
        "sweeps": report.sweeps,
        "policy_start": report.policy_start,
        "pass": report.pass,
    })
}

fn model_key(problem: &TeamProblem) -> String {
    serde_json::to_string(&problem.model).expect("models serialize")
}

pub(super) fn verify(config: &ExperimentConfig, out: &Path) -> Result<u8, CliError> {
    let cells = config.cells()?;
    guard_size(&cells)?;
    let reports = cells
        .par_iter()
        .map(|p| verify_secret_ballot(p, config.tol))
        .collect::<Result<Vec<_>, _>>()?;
    write_resolved(config, out)?;
    let pass = reports.iter().all(|r| r.pass);

    if let [report] = reports.as_slice() {
        let rows = report.rows.iter().map(|r| HistoryRow {
            history: &r.history,
            rho_star: r.rho_star,
            lambda_star: r.lambda_star,
            deviation: r.deviation,
        });
        write_csv(&out.join("verify.csv"), rows)?;
        let mut s = summary(&cells[0], report);
        s["config"] = json!(config);
        s["tol"] = json!(config.tol);
        write_json(&out.join("verify.json"), &s)?;
        write_json(&out.join("policy.json"), &report.policy)?;
    } else {
        let rows = cells.iter().zip(&reports).flat_map(|(p, report)| {
            report.rows.iter().map(move |r| CellHistoryRow {
                family: p.model.family_name(),
                model: model_key(p),
                n: p.n,
                l: p.l,
                p0: p.p0,
                c10: p.c10,
                c01: p.c01,
                history: &r.history,
                rho_star: r.rho_star,
                lambda_star: r.lambda_star,
                deviation: r.deviation,
            })
        });
        write_csv(&out.join("verify.csv"), rows)?;
        let max_deviation = reports.iter().map(|r| r.max_deviation).fold(0.0, f64::max);
        let max_risk_gap = reports
            .iter()
            .map(|r| (r.risk_seq - r.risk_par).abs())
            .fold(0.0, f64::max);
        let failed = reports.iter().filter(|r| !r.pass).count();
        let cell_summaries: Vec<_> = cells.iter().zip(&reports).map(|(p, r)| summary(p, r)).collect();
        write_json(
            &out.join("verify.json"),
            &json!({
                "config": config,
                "tol": config.tol,
                "cells": cell_summaries,
                "max_deviation": max_deviation,
                "max_risk_gap": max_risk_gap,
                "failed_cells": failed,
                "pass": pass,
            }),
        )?;
    }
    if pass {
        Ok(EXIT_OK)
    } else {
        log::warn!("secret-ballot check failed at tolerance {}", config.tol);
        Ok(EXIT_CHECK_FAILED)
    }
}

pub(super) fn simulate(config: &ExperimentConfig, out: &Path) -> Result<u8, CliError> {
    let problem = config.require_problem()?;
    let (report, exact) = match config.mode {
        SimMode::Parallel => {
            let thresholds: Vec<f64> = match &config.thresholds {
                Some(ts) => ts.iter().map(|t| t.0).collect(),
                None => {
                    let lambda = crate::optimize::optimize_identical_threshold(problem)?.thresholds[0];
                    vec![lambda; problem.n]
                }
            };
            let report = simulate_parallel(problem, &thresholds, config.trials, config.seed)?;
            (report, bayes_risk(problem, &thresholds)?)
        }
        SimMode::Sequential => {
            let path = config
                .policy
                .as_ref()
                .ok_or_else(|| CliError::config("sequential mode needs a `policy` file"))?;
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let policy: PolicyTree = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
            let report = simulate_sequential(problem, &policy, config.trials, config.seed)?;
            (report, tree_risk(problem, &policy)?)
        }
    };
    write_resolved(config, out)?;
    write_json(
        &out.join("simulate.json"),
        &json!({
            "config": config,
            "mode": config.mode,
            "exact_risk": exact,
            "report": report,
        }),
    )?;
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepRow {
    family: String,
    model: String,
    n: usize,
    l: usize,
    p0: f64,
    c10: f64,
    c01: f64,
    lambda_star: f64,
    risk_par: f64,
    risk_seq: f64,
    theorem_deviation: f64,
    root_deviation: f64,
    pbpo_identical_gap: f64,
    pbpo_spread: f64,
    pbpo_risk_gap: f64,
    on_boundary: bool,
    pass: bool,
}

impl SweepRow {
    fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.family, self.model, self.n, self.l, self.p0, self.c10, self.c01
        )
    }
}

fn cell_key(p: &TeamProblem) -> String {
    format!(
        "{}|{}|{}|{}|{}|{}|{}",
        p.model.family_name(),
        model_key(p),
        p.n,
        p.l,
        p.p0,
        p.c10,
        p.c01
    )
}

fn sweep_cell(config: &ExperimentConfig, index: usize, p: &TeamProblem) -> crate::Result<SweepRow> {
    let multi = pbpo_multistart(p, config.pbpo_inits, config.seed, index as u64)?;
    let identical = crate::optimize::optimize_identical_threshold(p)?;
    let report = verify_secret_ballot(p, config.tol)?;
    Ok(SweepRow {
        family: p.model.family_name().to_string(),
        model: model_key(p),
        n: p.n,
        l: p.l,
        p0: p.p0,
        c10: p.c10,
        c01: p.c01,
        lambda_star: report.lambda_star,
        risk_par: report.risk_par,
        risk_seq: report.risk_seq,
        theorem_deviation: report.max_deviation,
        root_deviation: report.root_deviation,
        pbpo_identical_gap: multi.identical_gap,
        pbpo_spread: multi.spread,
        pbpo_risk_gap: multi.risk_gap,
        on_boundary: identical.on_boundary,
        pass: report.pass,
    })
}

/// Rows already on disk; a torn final record from an interrupted run is dropped.
fn read_rows(path: &Path) -> Result<Vec<SweepRow>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for record in reader.deserialize::<SweepRow>() {
        match record {
            Ok(row) => rows.push(row),
            Err(e) => log::warn!("{}: skipping unreadable row: {e}", path.display()),
        }
    }
    Ok(rows)
}

pub(super) fn sweep(config: &ExperimentConfig, out: &Path) -> Result<u8, CliError> {
    let cells = config.cells()?;
    guard_size(&cells)?;
    write_resolved(config, out)?;
    let path = out.join("sweep.csv");

    let mut done: HashMap<String, SweepRow> = HashMap::new();
    let existing = read_rows(&path)?;
    for row in &existing {
        done.entry(row.key()).or_insert_with(|| row.clone());
    }
    // rewrite so the append below never lands after a torn line
    write_csv(&path, &existing)?;
    let pending: Vec<(usize, &TeamProblem)> = cells
        .iter()
        .enumerate()
        .filter(|(_, p)| !done.contains_key(&cell_key(p)))
        .collect();
    log::info!("{} of {} cells to run", pending.len(), cells.len());

    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    let (tx, rx) = mpsc::channel::<SweepRow>();
    let needs_header = existing.is_empty();
    let appender = std::thread::spawn(move || -> std::io::Result<Vec<SweepRow>> {
        let mut w = csv::WriterBuilder::new().has_headers(needs_header).from_writer(file);
        let mut written = Vec::new();
        for row in rx {
            w.serialize(&row)?;
            w.flush()?;
            written.push(row);
        }
        Ok(written)
    });
    let computed = pending
        .par_iter()
        .map_with(tx, |tx, &(i, p)| {
            let row = sweep_cell(config, i, p)?;
            let _ = tx.send(row);
            Ok(())
        })
        .collect::<crate::Result<Vec<()>>>();
    let written = appender
        .join()
        .map_err(|_| CliError::config("sweep appender panicked"))?
        .map_err(|e| CliError::io(&path, e))?;
    computed?;
    for row in written {
        done.entry(row.key()).or_insert(row);
    }

    let mut ordered: Vec<SweepRow> = Vec::with_capacity(done.len());
    for p in &cells {
        if let Some(row) = done.remove(&cell_key(p)) {
            ordered.push(row);
        }
    }
    // rows from other grids stay, after this grid's cells
    for row in existing {
        if let Some(row) = done.remove(&row.key()) {
            ordered.push(row);
        }
    }
    let tmp = out.join("sweep.csv.tmp");
    write_csv(&tmp, &ordered)?;
    std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;

    let in_grid = &ordered[..cells.len()];
    let failed = in_grid.iter().filter(|r| !r.pass).count();
    let max_deviation = in_grid.iter().map(|r| r.theorem_deviation).fold(0.0, f64::max);
    write_json(
        &out.join("sweep.json"),
        &json!({
            "config": config,
            "cells": cells.len(),
            "failed_cells": failed,
            "max_deviation": max_deviation,
            "pass": failed == 0,
        }),
    )?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

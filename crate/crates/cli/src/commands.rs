//! The four subcommands. Each one writes its resolved config and a small
//! run record next to its outputs so a directory can be rerun as is.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use flap::components::write_weights;
use flap::covariance::read_matrix_csv;
use flap::evaluation::{
    friedman_nemenyi, mse_curves, project_augmented, run_cv, ComponentSpec, CovarianceMode,
    MethodSpec, ScoreTable,
};
use flap::forecasting::{augment_base, forecast_panel};
use flap::ingestion::{read_panel, write_panel, Panel};
use flap::projection::{build_constraint, variance_reduction};
use flap::simulation::{simulate_replicates, surrogate_dgp, VarProcess};
use flap::{FlapError, Result};
use nalgebra::DMatrix;
use serde_json::json;

use crate::config::{CovarianceChoice, RunConfig};
use crate::logging::event;

/// Creates the output directory and records how the run was configured.
fn prepare_output(cfg: &RunConfig, command: &str, threads: usize) -> Result<PathBuf> {
    let dir = cfg.output_dir()?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let record = json!({
        "command": command,
        "seed": cfg.seed,
        "versions": { "flap": env!("CARGO_PKG_VERSION") },
        "threads": threads,
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_process(cfg: &RunConfig) -> Result<VarProcess> {
    let sim = cfg.simulation.clone().unwrap_or_default();
    match &sim.process {
        Some(path) => VarProcess::load(path),
        None => surrogate_dgp(sim.m, sim.order, cfg.seed),
    }
}

/// Replicate panels of the configured simulation. Replicate `r` (0-based)
/// is drawn with seed `seed + 1 + r`.
fn simulated_panels(cfg: &RunConfig) -> Result<(VarProcess, Vec<Panel>)> {
    let sim = cfg.simulation.clone().unwrap_or_default();
    let process = load_process(cfg)?;
    let panels = simulate_replicates(
        &process,
        sim.t,
        sim.burn_in,
        sim.replicates,
        cfg.seed.wrapping_add(1),
    )?;
    Ok((process, panels))
}

fn replicate_name(r: usize) -> String {
    format!("replicate_{:03}", r + 1)
}

/// The panels a command works on: the input file, or every replicate.
fn input_panels(cfg: &RunConfig) -> Result<Vec<(String, Panel)>> {
    match &cfg.input {
        Some(input) => Ok(vec![("input".into(), read_panel(&input.path, input.layout)?)]),
        None => Ok(simulated_panels(cfg)?
            .1
            .into_iter()
            .enumerate()
            .map(|(r, p)| (replicate_name(r), p))
            .collect()),
    }
}

fn covariance_mode(cfg: &RunConfig) -> Result<CovarianceMode> {
    Ok(match cfg.components.covariance {
        CovarianceChoice::PerHorizon => CovarianceMode::PerHorizon,
        CovarianceChoice::Proportional => CovarianceMode::Proportional,
        CovarianceChoice::Identity => CovarianceMode::Identity,
        CovarianceChoice::Known => {
            let mut list = Vec::new();
            for path in &cfg.components.covariance_files {
                list.push(read_matrix_csv(File::open(path)?)?);
            }
            CovarianceMode::Known(list)
        }
    })
}

pub fn simulate(cfg: &RunConfig, threads: usize) -> Result<()> {
    let (process, panels) = simulated_panels(cfg)?;
    let dir = prepare_output(cfg, "simulate", threads)?;
    process.save(&dir.join("process.json"))?;
    for (r, panel) in panels.iter().enumerate() {
        write_panel(panel, dir.join(format!("{}.csv", replicate_name(r))))?;
    }
    event(
        "simulate.done",
        json!({
            "replicates": panels.len(),
            "spectral_radius": process.spectral_radius(),
            "output": dir,
        }),
    );
    Ok(())
}

fn write_forecasts(path: &Path, names: &[String], values: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["h".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for (i, row) in values.row_iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Forecasts and projects once from the end of the panel.
pub fn flap(cfg: &RunConfig, threads: usize) -> Result<()> {
    let (name, panel) = input_panels(cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| FlapError::Config("no input panel".into()))?;
    let base_spec = &cfg.forecasters[0];
    let scheme = cfg.components.schemes[0];
    let p = *cfg.components.p.last().expect("validated");
    let horizon = cfg.cv.horizon;
    let mode = covariance_mode(cfg)?;

    let base = forecast_panel(&panel, base_spec, horizon)?;
    let weights = scheme.weights(&panel, p, cfg.standardize(), cfg.seed)?;
    let aug = augment_base(&base, &panel, &weights, &cfg.components.forecaster, horizon)?;
    let projected = project_augmented(&base, &weights, &aug, &mode, horizon)?;

    let dir = prepare_output(cfg, "flap", threads)?;
    let names = panel.names();
    write_forecasts(&dir.join("base_forecasts.csv"), names, &base.forecasts.values.rows(0, horizon).into_owned())?;
    write_forecasts(&dir.join("projected_forecasts.csv"), names, &projected.values)?;
    write_weights(
        &weights,
        names,
        create(&dir.join("weights.csv"))?,
        create(&dir.join("weights.json"))?,
    )?;

    let constraint = build_constraint(&weights);
    let mut reports = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let mut entry = if p == 0 {
            json!({
                "total_reduction": 0.0,
                "per_series_reduction": vec![0.0; panel.n_series()],
            })
        } else {
            variance_reduction(&constraint, &projected.covariances[h - 1])?.to_json()
        };
        entry["h"] = json!(h);
        reports.push(entry);
    }
    let report = json!({
        "method": MethodSpec::flap(base_spec.clone(), component_spec(cfg, scheme, p, &mode)).label(),
        "input": name,
        // Reductions are in the units the projection works in: each series
        // divided by its scale (all ones without standardization).
        "scale": weights.scaling().as_slice(),
        "horizons": reports,
    });
    std::fs::write(
        dir.join("variance_reduction.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    event(
        "flap.done",
        json!({ "p": p, "horizon": horizon, "output": dir }),
    );
    Ok(())
}

fn component_spec(
    cfg: &RunConfig,
    scheme: flap::evaluation::ComponentScheme,
    p: usize,
    mode: &CovarianceMode,
) -> ComponentSpec {
    ComponentSpec {
        scheme,
        p,
        standardize: cfg.standardize(),
        seed: cfg.seed,
        forecaster: cfg.components.forecaster.clone(),
        covariance: mode.clone(),
    }
}

/// Benchmark plus every scheme and `p` for each base forecaster.
pub fn method_grid(cfg: &RunConfig) -> Result<Vec<MethodSpec>> {
    let mode = covariance_mode(cfg)?;
    let mut methods = Vec::new();
    for base in &cfg.forecasters {
        methods.push(MethodSpec::benchmark(base.clone()));
        for &scheme in &cfg.components.schemes {
            for &p in &cfg.components.p {
                methods.push(MethodSpec::flap(base.clone(), component_spec(cfg, scheme, p, &mode)));
            }
        }
    }
    Ok(methods)
}

/// `p` values run by every component family in the table.
fn common_sweep(table: &ScoreTable) -> Vec<usize> {
    let mut families: Vec<&str> = Vec::new();
    for m in table.methods() {
        if m.p.is_some() && !families.contains(&m.family.as_str()) {
            families.push(&m.family);
        }
    }
    let mut sweep: Vec<usize> = table.methods().iter().filter_map(|m| m.p).collect();
    sweep.sort_unstable();
    sweep.dedup();
    sweep.retain(|&p| {
        families
            .iter()
            .all(|f| table.methods().iter().any(|m| m.family == *f && m.p == Some(p)))
    });
    sweep
}

/// Writes `ranks.json` and `mse_curves.csv` for a score table.
pub fn write_reports(table: &ScoreTable, dir: &Path, horizons: &[usize], alpha: f64) -> Result<()> {
    let labels = table.method_labels();
    let mut entries = Vec::new();
    for &h in horizons {
        let scores = table.mse_by_series(h)?;
        match friedman_nemenyi(&scores, &labels, alpha) {
            Ok(report) => entries.push(json!({ "h": h, "report": report })),
            Err(e @ (FlapError::DegenerateRanks | FlapError::Config(_))) => {
                let warning = format!("{}: {e}", crate::error_name(&e));
                log::warn!("ranks at h = {h} skipped: {warning}");
                entries.push(json!({ "h": h, "warning": warning }));
            }
            Err(e) => return Err(e),
        }
    }
    let ranks = json!({ "alpha": alpha, "horizons": entries });
    std::fs::write(dir.join("ranks.json"), serde_json::to_string_pretty(&ranks)? + "\n")?;

    let sweep = common_sweep(table);
    let curves = if sweep.is_empty() {
        Vec::new()
    } else {
        mse_curves(table, &sweep)?
    };
    flap::evaluation::write_curves(&curves, create(&dir.join("mse_curves.csv"))?)?;
    Ok(())
}

fn write_failures(table: &ScoreTable, dir: &Path) -> Result<()> {
    if table.failures().is_empty() {
        return Ok(());
    }
    let mut wtr = csv::Writer::from_writer(create(&dir.join("failures.csv"))?);
    wtr.write_record(["origin", "method", "cause"])?;
    for f in table.failures() {
        wtr.write_record([f.origin.to_string(), f.method.clone(), f.cause.clone()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Cross-validates the method grid on the input panel, or on each replicate.
pub fn evaluate(cfg: &RunConfig, threads: usize) -> Result<()> {
    let panels = input_panels(cfg)?;
    let methods = method_grid(cfg)?;
    let plans = panels
        .iter()
        .map(|(_, panel)| cfg.cv_plan(panel.n_obs()))
        .collect::<Result<Vec<_>>>()?;
    let dir = prepare_output(cfg, "evaluate", threads)?;
    let horizons = cfg.report_horizons(cfg.cv.horizon);
    let single = panels.len() == 1;
    let mut summary: Vec<(String, String, usize, f64)> = Vec::new();

    for ((name, panel), plan) in panels.iter().zip(&plans) {
        let table = run_cv(panel, plan, &methods)?;
        let sub = if single { dir.clone() } else { dir.join(name) };
        std::fs::create_dir_all(&sub)?;
        table.write_csv(create(&sub.join("scores.csv"))?)?;
        write_failures(&table, &sub)?;
        write_reports(&table, &sub, &horizons, cfg.report.alpha)?;
        for (i, label) in table.method_labels().into_iter().enumerate() {
            for h in 1..=table.horizon() {
                summary.push((name.clone(), label.clone(), h, table.mean_mse(i, h)?));
            }
        }
        event(
            "evaluate.panel",
            json!({
                "panel": name,
                "origins": table.origins().len(),
                "methods": methods.len(),
                "failed_cells": table.failures().len(),
            }),
        );
    }

    let mut wtr = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    wtr.write_record(["panel", "method", "h", "mse"])?;
    for (panel, method, h, mse) in &summary {
        wtr.write_record([panel.clone(), method.clone(), h.to_string(), mse.to_string()])?;
    }
    wtr.flush()?;
    event("evaluate.done", json!({ "panels": panels.len(), "output": dir }));
    Ok(())
}

/// Recomputes ranks and curves from an existing score file.
pub fn report(cfg: &RunConfig, scores: &Path, threads: usize) -> Result<()> {
    let table = ScoreTable::read_csv(File::open(scores)?)?;
    let dir = prepare_output(cfg, "report", threads)?;
    let horizons = cfg.report_horizons(table.horizon());
    write_reports(&table, &dir, &horizons, cfg.report.alpha)?;
    event("report.done", json!({ "methods": table.methods().len(), "output": dir }));
    Ok(())
}

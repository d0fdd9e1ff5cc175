use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;
use sidthe_core::closed_loop::SolveRecord;
use sidthe_core::{
    adverse_corner, invariant_box, params_interval, robust_invariant_box, run_batch,
    snapshot_predictions, ClosedLoopLog, Compartment, ControlSchedule, ExperimentConfig,
    InvariantBox, Params, PredictionCapture, Scenario, SolveStatus,
};

use crate::config::{read_plants_file, Config, MpcMode, PlantChoice};
use crate::output::{fmt, log_rows, state_header, state_row, OutputDir};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Block values covering `days`, holding the last configured value.
fn open_loop_schedule(cfg: &Config) -> Result<ControlSchedule, CliError> {
    let ol = &cfg.experiment.open_loop;
    let blocks = cfg.experiment.days.div_ceil(ol.block_days);
    let values: Vec<f64> = (0..blocks)
        .map(|k| ol.controls[k.min(ol.controls.len() - 1)])
        .collect();
    ControlSchedule::from_values(ol.block_days, &values)
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn open_loop_rows(cfg: &Config) -> Result<Vec<Vec<String>>, CliError> {
    let x0 = cfg.x0()?;
    let days = cfg.experiment.days;
    let tr = sidthe_core::simulate(&x0, &open_loop_schedule(cfg)?, &cfg.model.theta, days)
        .map_err(runtime)?;
    Ok(tr
        .states
        .iter()
        .enumerate()
        .map(|(d, x)| state_row(d, x, tr.controls.get(d).map(|u| u.value()), "open-loop"))
        .collect())
}

pub fn simulate(cfg: &Config, config_path: Option<&Path>) -> Result<(), CliError> {
    let rows = open_loop_rows(cfg)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_csv("trajectory.csv", &state_header(&[]), &rows)?;
    let t_col = 1 + Compartment::T.index();
    let (peak_day, peak) = rows
        .iter()
        .map(|r| r[t_col].parse::<f64>().unwrap_or(f64::NAN))
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |a, (d, t)| if t > a.1 { (d, t) } else { a },
        );
    out.finish("simulate", config_path, cfg)?;
    println!(
        "simulated {} days; peak T = {} on day {peak_day}; wrote {}",
        cfg.experiment.days,
        fmt(peak),
        cfg.output.dir.join("trajectory.csv").display()
    );
    Ok(())
}

fn plants(cfg: &Config) -> Result<Vec<Params>, CliError> {
    Ok(match cfg.experiment.plants {
        PlantChoice::Nominal => vec![cfg.model.theta],
        PlantChoice::Grid => cfg.scenario_set()?.thetas().copied().collect(),
        PlantChoice::Adverse => vec![adverse_corner(
            &cfg.scenarios.nominal,
            cfg.scenarios.rel_perturbation,
            cfg.experiment.days,
        )],
        PlantChoice::File => {
            let path = cfg
                .experiment
                .plants_file
                .as_deref()
                .ok_or_else(|| CliError::Config("no plants file".into()))?;
            read_plants_file(path)?
        }
    })
}

#[derive(Serialize)]
struct SolveSummary {
    day: usize,
    status: SolveStatus,
    objective: f64,
    first_action: f64,
    max_violation: f64,
    outer_iterations: usize,
    inner_iterations: usize,
    evaluations: usize,
    note: Option<String>,
}

impl From<&SolveRecord> for SolveSummary {
    fn from(s: &SolveRecord) -> Self {
        SolveSummary {
            day: s.day,
            status: s.status,
            objective: s.objective,
            first_action: s.first_action,
            max_violation: s.max_violation,
            outer_iterations: s.outer_iterations,
            inner_iterations: s.inner_iterations,
            evaluations: s.evaluations,
            note: s.note.clone(),
        }
    }
}

/// Per-plant sidecar. Wall-clock solve times are left out so that the file
/// is reproducible.
#[derive(Serialize)]
struct RunSidecar<'a> {
    plant: Params,
    mode: MpcMode,
    days: usize,
    cumulative_cost: f64,
    max_t: f64,
    violation_days: usize,
    infeasible_solves: usize,
    applied: &'a [f64],
    solves: Vec<SolveSummary>,
}

fn violation_days(log: &ClosedLoopLog) -> usize {
    log.violations
        .iter()
        .map(|v| v.day)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

const FAN_QUANTILES: [(&str, f64); 7] = [
    ("min", 0.0),
    ("q05", 0.05),
    ("q25", 0.25),
    ("median", 0.5),
    ("q75", 0.75),
    ("q95", 0.95),
    ("max", 1.0),
];

fn fan_rows(series: &[Vec<f64>]) -> Vec<Vec<String>> {
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|d| {
            let mut v: Vec<f64> = series.iter().filter_map(|s| s.get(d).copied()).collect();
            v.sort_by(f64::total_cmp);
            let mut row = vec![d.to_string(), v.len().to_string()];
            row.extend(FAN_QUANTILES.iter().map(|&(_, q)| fmt(quantile(&v, q))));
            row
        })
        .collect()
}

fn fan_header() -> Vec<String> {
    let mut h = vec!["day".to_string(), "plants".to_string()];
    h.extend(FAN_QUANTILES.iter().map(|(n, _)| n.to_string()));
    h
}

fn experiment_configs(cfg: &Config, plants: &[Params]) -> Result<Vec<ExperimentConfig>, CliError> {
    let x0 = cfg.x0()?;
    let safe_set = match cfg.experiment.mode {
        MpcMode::SafeSet => Some(cfg.safe_box()?),
        _ => None,
    };
    Ok(plants
        .iter()
        .enumerate()
        .map(|(k, &plant)| ExperimentConfig {
            plant,
            x0,
            controller: cfg.ocp.clone(),
            scenarios: cfg.scenarios.clone(),
            days: cfg.experiment.days,
            safe_set,
            violation_tolerance: cfg.experiment.violation_tolerance,
            capture: if k == 0 {
                PredictionCapture::Days(cfg.experiment.snapshot_days.clone())
            } else {
                PredictionCapture::None
            },
            seed: cfg.experiment.seed,
        })
        .collect())
}

#[derive(Serialize)]
struct Timings {
    total_seconds: f64,
    solve_seconds_per_plant: Vec<f64>,
}

pub fn mpc(cfg: &Config, config_path: Option<&Path>) -> Result<(), CliError> {
    let plants = plants(cfg)?;
    let configs = experiment_configs(cfg, &plants)?;
    let started = Instant::now();
    let logs = run_batch(&configs)
        .into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| CliError::Runtime(format!("plant {k}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let total_seconds = started.elapsed().as_secs_f64();

    let mut out = OutputDir::create(&cfg.output.dir)?;
    let safe = cfg.experiment.mode == MpcMode::SafeSet;
    let run_header = state_header(if safe { &["in_safe_set"] } else { &[] });
    for (k, log) in logs.iter().enumerate() {
        out.write_csv(
            &format!("runs/plant_{k:04}.csv"),
            &run_header,
            &log_rows(log),
        )?;
        let sidecar = RunSidecar {
            plant: log.plant,
            mode: cfg.experiment.mode,
            days: log.days(),
            cumulative_cost: log.cumulative_cost(),
            max_t: log.max_of(Compartment::T),
            violation_days: violation_days(log),
            infeasible_solves: log.infeasible_solves(),
            applied: &log.applied,
            solves: log.solves.iter().map(SolveSummary::from).collect(),
        };
        out.write_json(&format!("runs/plant_{k:04}.json"), &sidecar)?;
    }

    let mut summary_header: Vec<String> = vec!["plant".into()];
    summary_header.extend(Params::NAMES.iter().map(|s| s.to_string()));
    summary_header.extend(
        [
            "days",
            "cumulative_cost",
            "max_S",
            "max_I",
            "max_D",
            "max_T",
            "violation_days",
            "infeasible_solves",
            "non_optimal_solves",
        ]
        .map(String::from),
    );
    let summary: Vec<Vec<String>> = logs
        .iter()
        .enumerate()
        .map(|(k, log)| {
            let mut r = vec![k.to_string()];
            r.extend(log.plant.to_array().iter().map(|&v| fmt(v)));
            r.push(log.days().to_string());
            r.push(fmt(log.cumulative_cost()));
            for c in [
                Compartment::S,
                Compartment::I,
                Compartment::D,
                Compartment::T,
            ] {
                r.push(fmt(log.max_of(c)));
            }
            r.push(violation_days(log).to_string());
            r.push(log.infeasible_solves().to_string());
            r.push(
                log.solves
                    .iter()
                    .filter(|s| s.status != SolveStatus::Optimal)
                    .count()
                    .to_string(),
            );
            r
        })
        .collect();
    out.write_csv("summary.csv", &summary_header, &summary)?;

    let violations: Vec<Vec<String>> = logs
        .iter()
        .enumerate()
        .flat_map(|(k, log)| {
            log.violations.iter().map(move |v| {
                vec![
                    k.to_string(),
                    v.day.to_string(),
                    v.compartment.to_string(),
                    fmt(v.value),
                    fmt(v.bound),
                ]
            })
        })
        .collect();
    out.write_csv(
        "violations.csv",
        &["plant", "day", "compartment", "value", "bound"].map(String::from),
        &violations,
    )?;

    let t_series: Vec<Vec<f64>> = logs
        .iter()
        .map(|l| l.states.iter().map(|x| x.t()).collect())
        .collect();
    let u_series: Vec<Vec<f64>> = logs.iter().map(|l| l.daily_controls.clone()).collect();
    out.write_csv("figures/fan_T.csv", &fan_header(), &fan_rows(&t_series))?;
    out.write_csv("figures/fan_u.csv", &fan_header(), &fan_rows(&u_series))?;

    let mut snapshot_header: Vec<String> = ["scenario", "day"].map(String::from).to_vec();
    snapshot_header.extend(["S", "I", "D", "T", "H", "E", "u"].map(String::from));
    for &day in &cfg.experiment.snapshot_days {
        let snap = match snapshot_predictions(&logs[0], day, Some(cfg.experiment.snapshot_subset)) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("snapshot skipped: {e}; snapshots exist only for decision days");
                continue;
            }
        };
        let block = cfg.ocp.block_length_days;
        let mut rows = Vec::new();
        for (k, &i) in snap.scenario_indices.iter().enumerate() {
            for (offset, x) in snap.trajectories[k].iter().enumerate() {
                let u = snap.schedules[k].get(offset / block).copied();
                let mut r = vec![i.to_string(), (day + offset).to_string()];
                r.extend(x.as_array().iter().map(|&v| fmt(v)));
                r.push(
                    u.filter(|_| offset < snap.trajectories[k].len() - 1)
                        .map(fmt)
                        .unwrap_or_default(),
                );
                rows.push(r);
            }
        }
        out.write_csv(
            &format!("figures/snapshot_day{day:03}.csv"),
            &snapshot_header,
            &rows,
        )?;
    }

    let timings = Timings {
        total_seconds,
        solve_seconds_per_plant: logs
            .iter()
            .map(|l| l.solves.iter().map(|s| s.solve_seconds).sum())
            .collect(),
    };
    let timings_json = serde_json::to_vec_pretty(&timings).map_err(runtime)?;
    out.write_untracked("timings.json", &timings_json)?;
    out.finish("mpc", config_path, cfg)?;

    let costs: Vec<f64> = logs.iter().map(ClosedLoopLog::cumulative_cost).collect();
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    let max_t = logs
        .iter()
        .map(|l| l.max_of(Compartment::T))
        .fold(f64::NEG_INFINITY, f64::max);
    let violating = logs.iter().filter(|l| !l.violations.is_empty()).count();
    println!(
        "mode {}: {} plants, {} days, mean cumulative cost {}, max T {}, plants with violations {violating}, {:.1} s",
        cfg.experiment.mode.to_possible_value().expect("no skipped variants").get_name(),
        logs.len(),
        logs[0].days(),
        fmt(mean_cost),
        fmt(max_t),
        total_seconds
    );
    println!("wrote {}", cfg.output.dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct InvariantReport {
    pub u_max: f64,
    pub t_max: f64,
    pub nominal: InvariantBox,
    pub robust: InvariantBox,
    pub lower: Params,
    pub upper: Params,
}

pub fn invariant_report(cfg: &Config) -> Result<InvariantReport, CliError> {
    let t_max = cfg
        .t_max()
        .ok_or_else(|| CliError::Config("no T bound in ocp.state_bounds".into()))?;
    let iv = params_interval(&cfg.full_grid()?);
    Ok(InvariantReport {
        u_max: cfg.ocp.u_max,
        t_max,
        nominal: invariant_box(&cfg.scenarios.nominal, cfg.ocp.u_max, t_max),
        robust: robust_invariant_box(&iv, cfg.ocp.u_max, t_max),
        lower: *iv.lower(),
        upper: *iv.upper(),
    })
}

pub fn invariant_set(cfg: &Config, config_path: Option<&Path>) -> Result<(), CliError> {
    let report = invariant_report(cfg)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_json("invariant_set.json", &report)?;
    out.finish("invariant-set", config_path, cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(runtime)?
    );
    Ok(())
}

pub fn scenarios(cfg: &Config, config_path: Option<&Path>) -> Result<(), CliError> {
    let set = cfg.scenario_set()?;
    let list: &[Scenario] = set.scenarios();
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.write_json("scenarios.json", list)?;
    out.finish("scenarios", config_path, cfg)?;
    println!(
        "{} scenarios (nominal index {}); wrote {}",
        set.len(),
        set.nominal_index(),
        cfg.output.dir.join("scenarios.json").display()
    );
    Ok(())
}

//! Receding-horizon simulation: solve, apply the shared first block to the
//! plant for one block, measure, repeat.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariant::{contains, InvariantBox};
use crate::model::{
    simulate, step_with_rates, Compartment, ControlInput, ControlSchedule, MassRepair, ModelError,
    Params, Rates, State,
};
use crate::ocp::{
    build_ocp, solve, Mode, OcpConfig, OcpError, OcpSolution, SolveStatus, StateBound, WarmStart,
};
use crate::scenario::{
    grid_scenarios_masked, ParamMask, ScenarioError, ScenarioSet, ALL_PARAMS, DEFAULT_MAX_SCENARIOS,
};

/// How the controller's scenario set is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSettings {
    pub nominal: Params,
    pub rel_perturbation: f64,
    pub levels: usize,
    /// Parameters perturbed by the grid (α, γ, λ, δ, σ, τ).
    pub perturbed: ParamMask,
    /// Optional seeded subsample size.
    pub subsample: Option<usize>,
    pub max_scenarios: usize,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            nominal: Params::nominal(),
            rel_perturbation: 0.05,
            levels: 3,
            perturbed: ALL_PARAMS,
            subsample: None,
            max_scenarios: DEFAULT_MAX_SCENARIOS,
        }
    }
}

impl ScenarioSettings {
    pub fn build(&self, seed: u64) -> Result<ScenarioSet, ScenarioError> {
        let set = grid_scenarios_masked(
            &self.nominal,
            self.rel_perturbation,
            self.levels,
            self.perturbed,
            self.max_scenarios,
        )?;
        match self.subsample {
            Some(n) if n < set.len() => set.subsample(n, seed),
            _ => Ok(set),
        }
    }
}

/// Which solved predictions are kept in the log.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionCapture {
    #[default]
    All,
    None,
    Days(Vec<usize>),
}

impl PredictionCapture {
    fn keeps(&self, day: usize) -> bool {
        match self {
            PredictionCapture::All => true,
            PredictionCapture::None => false,
            PredictionCapture::Days(d) => d.contains(&day),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// True parameters of the simulated outbreak.
    pub plant: Params,
    pub x0: State,
    pub controller: OcpConfig,
    pub scenarios: ScenarioSettings,
    pub days: usize,
    /// When set, S, I, D and T are additionally constrained to this box at
    /// every predicted day.
    pub safe_set: Option<InvariantBox>,
    /// Plant excursions above a bound by more than this are logged.
    pub violation_tolerance: f64,
    pub capture: PredictionCapture,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            plant: Params::nominal(),
            x0: State::outbreak(MassRepair::Susceptible),
            controller: OcpConfig::default(),
            scenarios: ScenarioSettings::default(),
            days: 280,
            safe_set: None,
            violation_tolerance: 1e-6,
            capture: PredictionCapture::All,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// State bounds the controller enforces, including the safe box if any.
    pub fn effective_bounds(&self) -> Vec<StateBound> {
        let mut bounds = self.controller.state_bounds.clone();
        if let Some(b) = &self.safe_set {
            for c in [
                Compartment::S,
                Compartment::I,
                Compartment::D,
                Compartment::T,
            ] {
                let max = b.bound(c);
                match bounds.iter_mut().find(|sb| sb.compartment == c) {
                    Some(sb) => sb.max = sb.max.min(max),
                    None => bounds.push(StateBound {
                        compartment: c,
                        max,
                    }),
                }
            }
        }
        bounds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub day: usize,
    pub status: SolveStatus,
    pub objective: f64,
    pub first_action: f64,
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub evaluations: usize,
    pub solve_seconds: f64,
    /// Set when the problem could not be built (state already outside the
    /// constraint region).
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub day: usize,
    pub compartment: Compartment,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub mode: Mode,
    pub plant: Params,
    /// Plant state at the start of every day, `days + 1` entries.
    pub states: Vec<State>,
    /// Control applied on each day.
    pub daily_controls: Vec<f64>,
    /// Control applied per block.
    pub applied: Vec<f64>,
    /// Status of the solve that produced each day's control.
    pub daily_status: Vec<SolveStatus>,
    pub solves: Vec<SolveRecord>,
    pub violations: Vec<ViolationEvent>,
    /// Daily membership in the safe box, when one is configured.
    pub in_safe_set: Option<Vec<bool>>,
    pub block_length_days: usize,
    #[serde(skip)]
    pub predictions: BTreeMap<usize, OcpSolution>,
}

impl ClosedLoopLog {
    pub fn days(&self) -> usize {
        self.daily_controls.len()
    }

    /// `Σ_days u²`.
    pub fn cumulative_cost(&self) -> f64 {
        self.daily_controls.iter().map(|u| u * u).sum()
    }

    pub fn max_of(&self, c: Compartment) -> f64 {
        self.states
            .iter()
            .map(|x| x.get(c))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn infeasible_solves(&self) -> usize {
        self.solves
            .iter()
            .filter(|s| s.status == SolveStatus::Infeasible)
            .count()
    }

    /// Re-simulates the plant under the recorded controls.
    pub fn replay(&self) -> Result<Vec<State>, ModelError> {
        let controls = self
            .daily_controls
            .iter()
            .map(|&u| ControlInput::new(u))
            .collect::<Result<Vec<_>, _>>()?;
        let schedule = ControlSchedule::daily(controls);
        Ok(simulate(&self.states[0], &schedule, &self.plant, self.days())?.states)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("experiment aborted on day {day}: {reason}")]
    Aborted {
        day: usize,
        reason: String,
        partial: Box<ClosedLoopLog>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no stored predictions for day {day}")]
pub struct SnapshotError {
    pub day: usize,
}

/// Stored predictions of one solve, possibly thinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSnapshot {
    pub day: usize,
    pub scenario_indices: Vec<usize>,
    pub schedules: Vec<Vec<f64>>,
    pub trajectories: Vec<Vec<State>>,
}

/// Runs one closed-loop experiment.
pub fn run_closed_loop(config: &ExperimentConfig) -> Result<ClosedLoopLog, ExperimentError> {
    let ocp_cfg = OcpConfig {
        state_bounds: config.effective_bounds(),
        ..config.controller.clone()
    };
    ocp_cfg
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let block = ocp_cfg.block_length_days;
    let blocks = config.days / block;
    if blocks * block != config.days {
        warn!(
            "{} days is not a multiple of the {}-day block; truncating to {}",
            config.days,
            block,
            blocks * block
        );
    }
    let scenarios = config.scenarios.build(config.seed)?;
    let rates = Rates::from(&config.plant);

    let mut log = ClosedLoopLog {
        mode: ocp_cfg.mode,
        plant: config.plant,
        states: vec![config.x0],
        daily_controls: Vec::with_capacity(blocks * block),
        applied: Vec::with_capacity(blocks),
        daily_status: Vec::with_capacity(blocks * block),
        solves: Vec::with_capacity(blocks),
        violations: Vec::new(),
        in_safe_set: config.safe_set.map(|b| vec![contains(&b, &config.x0)]),
        block_length_days: block,
        predictions: BTreeMap::new(),
    };
    record_violations(
        &mut log,
        &ocp_cfg.state_bounds,
        0,
        &config.x0,
        config.violation_tolerance,
    );

    let mut warm: Option<WarmStart> = None;
    let mut x = config.x0;
    for b in 0..blocks {
        let day = b * block;
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<OcpSolution, OcpError> {
            let problem = build_ocp(&x, &scenarios, &ocp_cfg)?;
            solve(&problem, warm.as_ref())
        }));
        let (u, record) = match outcome {
            Ok(Ok(sol)) => {
                let record = SolveRecord {
                    day,
                    status: sol.status,
                    objective: sol.objective,
                    first_action: sol.first_action,
                    max_violation: sol.max_violation,
                    outer_iterations: sol.outer_iterations,
                    inner_iterations: sol.inner_iterations,
                    evaluations: sol.evaluations,
                    solve_seconds: sol.solve_seconds,
                    note: None,
                };
                let u = sol.first_action;
                warm = (sol.status != SolveStatus::Infeasible)
                    .then(|| sol.shifted_warm_start(block, ocp_cfg.state_bounds.len()));
                if config.capture.keeps(day) {
                    log.predictions.insert(day, sol);
                }
                (u, record)
            }
            Ok(Err(OcpError::InitialStateInfeasible {
                compartment,
                max,
                value,
            })) => {
                warm = None;
                let note =
                    format!("state outside constraint region: {compartment} = {value} > {max}");
                (
                    ocp_cfg.u_max,
                    SolveRecord {
                        day,
                        status: SolveStatus::Infeasible,
                        objective: f64::NAN,
                        first_action: ocp_cfg.u_max,
                        max_violation: value - max,
                        outer_iterations: 0,
                        inner_iterations: 0,
                        evaluations: 0,
                        solve_seconds: 0.0,
                        note: Some(note),
                    },
                )
            }
            Ok(Err(e)) => {
                return Err(ExperimentError::Aborted {
                    day,
                    reason: e.to_string(),
                    partial: Box::new(log),
                })
            }
            Err(panic) => {
                let reason = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "solver panicked".into());
                return Err(ExperimentError::Aborted {
                    day,
                    reason,
                    partial: Box::new(log),
                });
            }
        };
        info!(
            target: "closed_loop",
            "day={} status={} u={:.6} objective={:.6e} evals={} seconds={:.3}",
            day, record.status, u, record.objective, record.evaluations, record.solve_seconds
        );
        let status = record.status;
        log.solves.push(record);
        log.applied.push(u);

        for d in day..day + block {
            x = match step_with_rates(&x, u, &rates, 1.0) {
                Ok(next) => next,
                Err(e) => {
                    return Err(ExperimentError::Aborted {
                        day: d,
                        reason: e.to_string(),
                        partial: Box::new(log),
                    })
                }
            };
            log.states.push(x);
            log.daily_controls.push(u);
            log.daily_status.push(status);
            if let (Some(flags), Some(b)) = (log.in_safe_set.as_mut(), config.safe_set.as_ref()) {
                flags.push(contains(b, &x));
            }
            record_violations(
                &mut log,
                &ocp_cfg.state_bounds,
                d + 1,
                &x,
                config.violation_tolerance,
            );
        }
    }
    Ok(log)
}

fn record_violations(
    log: &mut ClosedLoopLog,
    bounds: &[StateBound],
    day: usize,
    x: &State,
    tol: f64,
) {
    for b in bounds {
        let v = x.get(b.compartment);
        if v > b.max + tol {
            log.violations.push(ViolationEvent {
                day,
                compartment: b.compartment,
                value: v,
                bound: b.max,
            });
        }
    }
}

/// Independent runs, in input order.
pub fn run_batch(configs: &[ExperimentConfig]) -> Vec<Result<ClosedLoopLog, ExperimentError>> {
    configs.par_iter().map(run_closed_loop).collect()
}

/// Predictions stored for the decision instant `day`, optionally thinned to
/// `subset` scenarios by a fixed index stride.
pub fn snapshot_predictions(
    log: &ClosedLoopLog,
    day: usize,
    subset: Option<usize>,
) -> Result<PredictionSnapshot, SnapshotError> {
    let sol = log.predictions.get(&day).ok_or(SnapshotError { day })?;
    let n = sol.schedules.len();
    let indices: Vec<usize> = match subset {
        Some(k) if k > 0 && k < n => {
            let stride = n.div_ceil(k);
            (0..n).step_by(stride).take(k).collect()
        }
        _ => (0..n).collect(),
    };
    Ok(PredictionSnapshot {
        day,
        schedules: indices.iter().map(|&i| sol.schedules[i].clone()).collect(),
        trajectories: indices
            .iter()
            .map(|&i| sol.trajectories[i].clone())
            .collect(),
        scenario_indices: indices,
    })
}

/// The interval corner that maximises the uncontrolled peak of T.
pub fn adverse_corner(nominal: &Params, rel: f64, days: usize) -> Params {
    let lo = nominal.scaled([1.0 - rel; 6]).expect("rel < 1");
    let hi = nominal.scaled([1.0 + rel; 6]).expect("rel < 1");
    let iv = crate::invariant::ParamsInterval::new(lo, hi).expect("lo <= hi");
    let x0 = State::outbreak(MassRepair::Susceptible);
    let schedule = ControlSchedule::constant(ControlInput::NONE, days);
    iv.corners()
        .into_iter()
        .map(|p| {
            let peak = simulate(&x0, &schedule, &p, days)
                .map(|tr| tr.component(Compartment::T).fold(0.0, f64::max))
                .unwrap_or(f64::NEG_INFINITY);
            (p, peak)
        })
        .fold((*nominal, f64::NEG_INFINITY), |acc, (p, peak)| {
            if peak > acc.1 {
                (p, peak)
            } else {
                acc
            }
        })
        .0
}

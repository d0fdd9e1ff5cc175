//! Scenario-based finite-horizon optimal control of interventions.
//!
//! The horizon is split into `horizon_blocks` blocks of constant control.
//! Each scenario carries its own schedule (recourse), every scenario shares
//! one schedule (robust), or only the nominal scenario is used (nominal).
//! In recourse mode the first block is a single shared decision variable,
//! so non-anticipativity holds by construction.
//!
//! States are eliminated by forward RK4 rollout per scenario; gradients come
//! from the discrete adjoint of that rollout. State bounds are handled by an
//! augmented Lagrangian whose box-constrained subproblems are solved with
//! projected L-BFGS. The L-BFGS recursion starts from a Gauss-Newton model
//! of the penalised objective built from forward state sensitivities.

mod lbfgs;
mod rollout;

use std::cell::RefCell;
use web_time::Instant;

use nalgebra::{DMatrix, DVector};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{simulate, Compartment, ControlSchedule, ModelError, Params, Rates, State};
use crate::scenario::ScenarioSet;

use lbfgs::{BoxLbfgs, InnerStatus};
use rollout::{Active, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One schedule shared by all scenarios.
    Robust,
    /// One schedule per scenario with a shared first block.
    Recourse,
    /// Nominal scenario only.
    Nominal,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Robust => "robust",
            Mode::Recourse => "recourse",
            Mode::Nominal => "nominal",
        })
    }
}

/// `state[compartment] <= max` at every daily grid point of the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBound {
    pub compartment: Compartment,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Projected-gradient stationarity tolerance.
    pub tol_stat: f64,
    /// Absolute constraint violation tolerance, in state units.
    pub tol_feas: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub lbfgs_memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_stat: 1e-6,
            tol_feas: 1e-8,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_outer: 20,
            max_inner: 500,
            lbfgs_memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon_blocks: usize,
    pub block_length_days: usize,
    /// Integration step in days; `1 / step_days` must be an integer.
    pub step_days: f64,
    pub u_max: f64,
    pub state_bounds: Vec<StateBound>,
    /// Stage cost `ℓ(u) = u^p`.
    pub cost_exponent: f64,
    pub mode: Mode,
    pub solver: SolverOptions,
}

impl Default for OcpConfig {
    fn default() -> Self {
        OcpConfig {
            horizon_blocks: 7,
            block_length_days: 14,
            step_days: 1.0,
            u_max: 0.75,
            state_bounds: vec![StateBound {
                compartment: Compartment::T,
                max: 0.002,
            }],
            cost_exponent: 2.0,
            mode: Mode::Recourse,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid OCP configuration: {0}")]
    Config(String),
    #[error("initial state violates {compartment} <= {max} (value {value})")]
    InitialStateInfeasible {
        compartment: Compartment,
        max: f64,
        value: f64,
    },
    #[error("decision vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), OcpError> {
        let bad = |m: &str| Err(OcpError::Config(m.to_string()));
        if self.horizon_blocks == 0 {
            return bad("horizon_blocks must be at least 1");
        }
        if self.block_length_days == 0 {
            return bad("block_length_days must be at least 1");
        }
        if !(0.0..1.0).contains(&self.u_max) {
            return bad("u_max must lie in [0, 1)");
        }
        if self.steps_per_day().is_none() {
            return bad("step_days must be 1/k for a positive integer k");
        }
        if !(self.cost_exponent >= 1.0 && self.cost_exponent.is_finite()) {
            return bad("cost_exponent must be >= 1");
        }
        if let Some(b) = self
            .state_bounds
            .iter()
            .find(|b| !(b.max > self.solver.tol_feas && b.max <= 1.0))
        {
            return Err(OcpError::Config(format!(
                "bound on {} must lie in (tol_feas, 1], got {}",
                b.compartment, b.max
            )));
        }
        let s = &self.solver;
        if !(s.tol_stat > 0.0
            && s.tol_feas > 0.0
            && s.initial_penalty > 0.0
            && s.penalty_growth > 1.0)
            || s.max_outer == 0
            || s.max_inner == 0
            || s.lbfgs_memory == 0
        {
            return bad("solver options must be positive (penalty growth > 1)");
        }
        Ok(())
    }

    pub fn horizon_days(&self) -> usize {
        self.horizon_blocks * self.block_length_days
    }

    fn steps_per_day(&self) -> Option<usize> {
        if !(self.step_days > 0.0 && self.step_days <= 1.0) {
            return None;
        }
        let k = (1.0 / self.step_days).round();
        ((k * self.step_days - 1.0).abs() < 1e-12).then_some(k as usize)
    }

    fn cost(&self, u: f64) -> f64 {
        if self.cost_exponent == 2.0 {
            u * u
        } else {
            u.powf(self.cost_exponent)
        }
    }

    /// `ℓ''(u)`, floored so the Gauss-Newton model stays positive definite.
    fn cost_curvature(&self, u: f64) -> f64 {
        let e = self.cost_exponent;
        let c = if e == 2.0 {
            2.0
        } else {
            e * (e - 1.0) * u.max(1e-3).powf(e - 2.0)
        };
        c.max(1e-4)
    }

    fn cost_derivative(&self, u: f64) -> f64 {
        if self.cost_exponent == 2.0 {
            2.0 * u
        } else {
            self.cost_exponent * u.powf(self.cost_exponent - 1.0)
        }
    }
}

/// Where each `(scenario, block)` control lives in the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub mode: Mode,
    pub scenarios: usize,
    pub blocks: usize,
}

impl Layout {
    /// Number of free decision variables.
    pub fn num_vars(&self) -> usize {
        match self.mode {
            Mode::Robust | Mode::Nominal => self.blocks,
            Mode::Recourse => 1 + self.scenarios * (self.blocks - 1),
        }
    }

    /// Size of the full per-scenario schedule table.
    pub fn schedule_entries(&self) -> usize {
        self.scenarios * self.blocks
    }

    pub fn index(&self, scenario: usize, block: usize) -> usize {
        match self.mode {
            Mode::Robust | Mode::Nominal => block,
            Mode::Recourse if block == 0 => 0,
            Mode::Recourse => 1 + scenario * (self.blocks - 1) + (block - 1),
        }
    }

    /// Per-scenario schedules from a decision vector.
    pub fn expand(&self, u: &[f64]) -> Vec<Vec<f64>> {
        (0..self.scenarios)
            .map(|i| (0..self.blocks).map(|k| u[self.index(i, k)]).collect())
            .collect()
    }

    /// Decision vector from per-scenario schedules. Entries tied across
    /// scenarios get the probability-weighted mean.
    pub fn compress(&self, schedules: &[Vec<f64>], probabilities: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.num_vars()];
        let mut w = vec![0.0; self.num_vars()];
        for (i, sched) in schedules.iter().enumerate().take(self.scenarios) {
            for (k, &v) in sched.iter().enumerate().take(self.blocks) {
                let j = self.index(i, k);
                u[j] += probabilities[i] * v;
                w[j] += probabilities[i];
            }
        }
        u.iter_mut().zip(&w).for_each(|(v, &wt)| {
            if wt > 0.0 {
                *v /= wt
            }
        });
        u
    }
}

/// The finite-dimensional program obtained by condensing the scenario OCP.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    x0: State,
    config: OcpConfig,
    scenarios: ScenarioSet,
    rates: Vec<Rates>,
    probabilities: Vec<f64>,
    layout: Layout,
    grid: Grid,
    bounds: Vec<(usize, f64)>,
}

/// Optional starting point for [`solve`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarmStart {
    /// Per-scenario schedules of `horizon_blocks` entries.
    pub schedules: Vec<Vec<f64>>,
    /// Constraint multipliers in the problem's constraint order.
    pub multipliers: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIter => "max-iter",
            SolveStatus::Infeasible => "infeasible",
        })
    }
}

/// One augmented Lagrangian outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub step_norm: f64,
    pub penalty: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub mode: Mode,
    pub status: SolveStatus,
    /// One schedule of `horizon_blocks` values per scenario.
    pub schedules: Vec<Vec<f64>>,
    /// The shared first block, i.e. the action to apply.
    pub first_action: f64,
    /// Predicted daily states per scenario (`horizon_days + 1` each).
    pub trajectories: Vec<Vec<State>>,
    pub objective: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub evaluations: usize,
    pub solve_seconds: f64,
    pub diagnostics: Vec<OuterRecord>,
    #[serde(skip)]
    pub multipliers: Vec<f64>,
}

impl OcpSolution {
    /// Shift every schedule by one block and repeat the last block; shift
    /// the multipliers by one block of days.
    pub fn shifted_warm_start(&self, block_days: usize, bounds: usize) -> WarmStart {
        let schedules = self
            .schedules
            .iter()
            .map(|s| {
                let mut v: Vec<f64> = s.iter().skip(1).copied().collect();
                v.push(*s.last().expect("at least one block"));
                v
            })
            .collect();
        let multipliers = (!self.multipliers.is_empty()).then(|| {
            let per_scenario = self.multipliers.len() / self.schedules.len().max(1);
            let shift = block_days * bounds;
            self.multipliers
                .chunks(per_scenario)
                .flat_map(|m| {
                    m.iter()
                        .skip(shift)
                        .copied()
                        .chain(std::iter::repeat_n(0.0, shift.min(per_scenario)))
                })
                .collect()
        });
        WarmStart {
            schedules,
            multipliers,
        }
    }

    pub fn schedule(&self, scenario: usize, block_days: usize) -> ControlSchedule {
        ControlSchedule::from_values(block_days, &self.schedules[scenario])
            .expect("solver schedules lie in [0, u_max]")
    }
}

/// Condensed transcription of the scenario OCP from `x0`.
pub fn build_ocp(
    x0: &State,
    scenarios: &ScenarioSet,
    config: &OcpConfig,
) -> Result<NlpProblem, OcpError> {
    config.validate()?;
    for b in &config.state_bounds {
        let v = x0.get(b.compartment);
        if v > b.max {
            return Err(OcpError::InitialStateInfeasible {
                compartment: b.compartment,
                max: b.max,
                value: v,
            });
        }
    }
    let scenarios = match config.mode {
        Mode::Nominal => scenarios.nominal_only(),
        _ => scenarios.clone(),
    };
    let layout = Layout {
        mode: config.mode,
        scenarios: scenarios.len(),
        blocks: config.horizon_blocks,
    };
    let grid = Grid {
        steps_per_day: config.steps_per_day().expect("validated"),
        block_days: config.block_length_days,
        blocks: config.horizon_blocks,
    };
    let mut bounds = Vec::with_capacity(config.state_bounds.len());
    for b in &config.state_bounds {
        if matches!(b.compartment, Compartment::H | Compartment::E) {
            return Err(OcpError::Config(format!(
                "bounds on {} are not supported",
                b.compartment
            )));
        }
        // The feasibility tolerance is taken on the inside of the bound, so
        // an accepted iterate never exceeds `max`.
        bounds.push((b.compartment.index(), b.max - config.solver.tol_feas));
    }
    Ok(NlpProblem {
        x0: *x0,
        config: config.clone(),
        rates: scenarios.thetas().map(Rates::from).collect(),
        probabilities: scenarios.probabilities().collect(),
        scenarios,
        layout,
        grid,
        bounds,
    })
}

/// Per-scenario result of one evaluation.
struct ScenarioEval {
    penalty: f64,
    violation: f64,
    /// Fingerprint of the active penalty terms (Gauss-Newton runs only).
    piece: u64,
}

/// Per-scenario Gauss-Newton blocks and the fingerprint of the active
/// penalty terms they were built from.
#[derive(Debug, Default)]
struct GaussNewton {
    blocks: Vec<f64>,
    piece: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(FNV_PRIME)
}

impl NlpProblem {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }

    pub fn num_constraints(&self) -> usize {
        self.scenarios.len() * self.grid.days() * self.bounds.len()
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.scenarios
    }

    pub fn config(&self) -> &OcpConfig {
        &self.config
    }

    pub fn x0(&self) -> &State {
        &self.x0
    }

    fn constraints_per_scenario(&self) -> usize {
        self.grid.days() * self.bounds.len()
    }

    fn check_dims(&self, u: &[f64]) -> Result<(), OcpError> {
        if u.len() != self.num_vars() {
            return Err(OcpError::Dimension {
                expected: self.num_vars(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn x0_active(&self) -> Active {
        let a = self.x0.as_array();
        [a[0], a[1], a[2], a[3]]
    }

    /// `Σ_i p_i Σ_k ℓ(u_k^i) · block_length`.
    pub fn objective(&self, u: &[f64]) -> f64 {
        let l = self.config.block_length_days as f64;
        let mut total = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            let s: f64 = (0..self.layout.blocks)
                .map(|k| self.config.cost(u[self.layout.index(i, k)]))
                .sum();
            total += p * s;
        }
        total * l
    }

    fn add_objective_gradient(&self, u: &[f64], grad: &mut [f64]) {
        let l = self.config.block_length_days as f64;
        for (i, p) in self.probabilities.iter().enumerate() {
            for k in 0..self.layout.blocks {
                let j = self.layout.index(i, k);
                grad[j] += p * l * self.config.cost_derivative(u[j]);
            }
        }
    }

    /// Normalised constraint values `(x_c(day) - m) / m` with
    /// `m = max - tol_feas`, ordered by scenario, then day, then bound.
    pub fn constraints(&self, u: &[f64]) -> Result<Vec<f64>, OcpError> {
        self.check_dims(u)?;
        let mut out = Vec::with_capacity(self.num_constraints());
        let mut states = Vec::with_capacity(self.grid.steps() + 1);
        let x0 = self.x0_active();
        for (i, r) in self.rates.iter().enumerate() {
            let controls: Vec<f64> = (0..self.layout.blocks)
                .map(|k| u[self.layout.index(i, k)])
                .collect();
            rollout::forward(r, &self.grid, &x0, &controls, &mut states);
            for day in 1..=self.grid.days() {
                let x = &states[day * self.grid.steps_per_day];
                out.extend(self.bounds.iter().map(|&(c, m)| (x[c] - m) / m));
            }
        }
        Ok(out)
    }

    /// Largest absolute excess over `max - tol_feas`, over all scenarios and
    /// days.
    pub fn max_violation(&self, u: &[f64]) -> Result<f64, OcpError> {
        self.check_dims(u)?;
        Ok(self.evaluate(u, None, 0.0, None, None).1)
    }

    /// Gradient of the objective alone.
    pub fn objective_gradient(&self, u: &[f64]) -> Result<Vec<f64>, OcpError> {
        self.check_dims(u)?;
        let mut g = vec![0.0; self.num_vars()];
        self.add_objective_gradient(u, &mut g);
        Ok(g)
    }

    /// Value and gradient of the augmented Lagrangian
    /// `f(u) + Σ_i p_i Σ_j (max(0, μ_ij + ρ g_ij)² - μ_ij²) / (2ρ)`, where `i`
    /// runs over scenarios. With `ρ = 0` this is `f + Σ_i p_i Σ_j μ_ij g_ij`.
    pub fn augmented_lagrangian(
        &self,
        u: &[f64],
        multipliers: &[f64],
        penalty: f64,
    ) -> Result<(f64, Vec<f64>), OcpError> {
        self.check_dims(u)?;
        if multipliers.len() != self.num_constraints() {
            return Err(OcpError::Dimension {
                expected: self.num_constraints(),
                got: multipliers.len(),
            });
        }
        let mut g = vec![0.0; self.num_vars()];
        let (v, _) = self.evaluate(u, Some(multipliers), penalty, Some(&mut g), None);
        Ok((v, g))
    }

    /// Evaluates the augmented objective, optionally its gradient and the
    /// per-scenario Gauss-Newton blocks (`blocks × blocks`, row-major, one
    /// per scenario). Returns the value and the max absolute violation.
    fn evaluate(
        &self,
        u: &[f64],
        multipliers: Option<&[f64]>,
        penalty: f64,
        grad: Option<&mut [f64]>,
        gauss_newton: Option<&mut GaussNewton>,
    ) -> (f64, f64) {
        let nb = self.layout.blocks;
        let ns = self.scenarios.len();
        let want_grad = grad.is_some();
        let want_gn = gauss_newton.is_some() && want_grad;
        let width = if want_grad { nb } else { 0 } + if want_gn { nb * nb } else { 0 };
        let mut work = vec![0.0; ns * width];
        let per = self.constraints_per_scenario();

        let run = |i: usize, w: &mut [f64]| -> ScenarioEval {
            let controls: Vec<f64> = (0..nb).map(|k| u[self.layout.index(i, k)]).collect();
            let mult = multipliers.map(|m| &m[i * per..(i + 1) * per]);
            let (bg, gn) = w.split_at_mut(if want_grad { nb } else { 0 });
            let gn = want_gn.then_some(gn);
            self.scenario_eval(i, &controls, mult, penalty, want_grad.then_some(bg), gn)
        };
        let parallel = rayon::current_num_threads() > 1 && ns >= 8;
        let results: Vec<ScenarioEval> = match (width, parallel) {
            (0, true) => (0..ns).into_par_iter().map(|i| run(i, &mut [])).collect(),
            (0, false) => (0..ns).map(|i| run(i, &mut [])).collect(),
            (_, true) => work
                .par_chunks_mut(width)
                .enumerate()
                .map(|(i, w)| run(i, w))
                .collect(),
            (_, false) => work
                .chunks_mut(width)
                .enumerate()
                .map(|(i, w)| run(i, w))
                .collect(),
        };

        // Order-fixed reduction.
        let mut value = self.objective(u);
        let mut violation = 0.0f64;
        for r in &results {
            value += r.penalty;
            violation = violation.max(r.violation);
        }
        if let Some(grad) = grad {
            grad.iter_mut().for_each(|g| *g = 0.0);
            self.add_objective_gradient(u, grad);
            for i in 0..ns {
                for k in 0..nb {
                    grad[self.layout.index(i, k)] += work[i * width + k];
                }
            }
        }
        if let (true, Some(out)) = (want_gn, gauss_newton) {
            out.blocks.clear();
            out.blocks
                .extend(work.chunks(width).flat_map(|w| w[nb..].iter().copied()));
            out.piece = results.iter().fold(FNV_OFFSET, |h, r| fnv_mix(h, r.piece));
        }
        (value, violation)
    }

    fn scenario_eval(
        &self,
        i: usize,
        controls: &[f64],
        multipliers: Option<&[f64]>,
        penalty: f64,
        block_grad: Option<&mut [f64]>,
        gauss_newton: Option<&mut [f64]>,
    ) -> ScenarioEval {
        let r = &self.rates[i];
        let p = self.probabilities[i];
        let mut states = Vec::with_capacity(self.grid.steps() + 1);
        rollout::forward(r, &self.grid, &self.x0_active(), controls, &mut states);
        let spd = self.grid.steps_per_day;
        let nbounds = self.bounds.len();

        let mut value = 0.0;
        let mut violation = 0.0f64;
        for day in 1..=self.grid.days() {
            let x = &states[day * spd];
            for (b, &(c, m)) in self.bounds.iter().enumerate() {
                violation = violation.max(x[c] - m);
                if let Some(mu_all) = multipliers {
                    let mu = mu_all[(day - 1) * nbounds + b];
                    let g = (x[c] - m) / m;
                    value += p * penalty_term(mu, g, penalty).0;
                }
            }
        }

        let mut piece = 0;
        if let (Some(block_grad), Some(mu_all)) = (block_grad, multipliers) {
            {
                let bounds = &self.bounds;
                rollout::backward(
                    r,
                    &self.grid,
                    controls,
                    &states,
                    |day, x| {
                        let mut s = [0.0; 4];
                        for (b, &(c, m)) in bounds.iter().enumerate() {
                            let mu = mu_all[(day - 1) * nbounds + b];
                            let dpsi = penalty_term(mu, (x[c] - m) / m, penalty).1;
                            s[c] += p * dpsi / m;
                        }
                        s
                    },
                    block_grad,
                );
            }
            if let Some(gn) = gauss_newton {
                piece = self.gauss_newton_block(i, controls, &states, mu_all, penalty, gn);
            }
        }
        ScenarioEval {
            penalty: value,
            violation: violation.max(0.0),
            piece,
        }
    }

    /// `p_i (L diag ℓ''(u) + ρ Σ_active ∇g ∇gᵀ)` for one scenario. Returns
    /// the fingerprint of the active penalty terms.
    fn gauss_newton_block(
        &self,
        i: usize,
        controls: &[f64],
        states: &[Active],
        multipliers: &[f64],
        penalty: f64,
        out: &mut [f64],
    ) -> u64 {
        let nb = self.layout.blocks;
        let p = self.probabilities[i];
        let l = self.config.block_length_days as f64;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..nb {
            out[k * nb + k] = p * l * self.config.cost_curvature(controls[k]);
        }
        if penalty <= 0.0 {
            return FNV_OFFSET;
        }
        let mut piece = FNV_OFFSET;
        let mut sens = Vec::new();
        rollout::sensitivities(&self.rates[i], &self.grid, controls, states, &mut sens);
        let spd = self.grid.steps_per_day;
        let nbounds = self.bounds.len();
        let mut jac = vec![0.0; nb];
        for day in 1..=self.grid.days() {
            let x = &states[day * spd];
            for (b, &(c, m)) in self.bounds.iter().enumerate() {
                let mu = multipliers[(day - 1) * nbounds + b];
                if mu + penalty * (x[c] - m) / m <= 0.0 {
                    continue;
                }
                piece = fnv_mix(piece, ((day - 1) * nbounds + b) as u64);
                for (k, j) in jac.iter_mut().enumerate() {
                    *j = sens[(day - 1) * nb + k][c] / m;
                }
                let w = p * penalty;
                for a in 0..nb {
                    if jac[a] == 0.0 {
                        continue;
                    }
                    for bb in 0..nb {
                        out[a * nb + bb] += w * jac[a] * jac[bb];
                    }
                }
            }
        }
        piece
    }

    /// Solves `H d = r` on the free variables in place, where `H` is the
    /// Gauss-Newton model assembled from per-scenario `blocks`. Fixed
    /// variables are set to zero.
    fn apply_gauss_newton_inverse(&self, blocks: &[f64], free: &[bool], r: &mut [f64]) {
        let nb = self.layout.blocks;
        match self.layout.mode {
            Mode::Robust | Mode::Nominal => {
                let mut h = vec![0.0; nb * nb];
                for blk in blocks.chunks(nb * nb) {
                    h.iter_mut().zip(blk).for_each(|(a, b)| *a += b);
                }
                let idx: Vec<usize> = (0..nb).filter(|&k| free[k]).collect();
                masked_solve(&h, nb, &idx, r);
            }
            Mode::Recourse => {
                // Arrowhead system: the shared first block couples all
                // scenarios; eliminate the per-scenario blocks first.
                let m = nb - 1;
                let mut schur = 0.0;
                let mut rhs0 = r[0];
                let mut coupling = Vec::with_capacity(self.scenarios.len());
                for (i, blk) in blocks.chunks(nb * nb).enumerate() {
                    let base = 1 + i * m;
                    let idx: Vec<usize> = (0..m).filter(|&k| free[base + k]).collect();
                    let sub: Vec<f64> = (0..m)
                        .flat_map(|a| (0..m).map(move |b| (a, b)))
                        .map(|(a, b)| blk[(a + 1) * nb + b + 1])
                        .collect();
                    let mut y: Vec<f64> = r[base..base + m].to_vec();
                    let mut z: Vec<f64> = (0..m).map(|k| blk[(k + 1) * nb]).collect();
                    masked_solve(&sub, m, &idx, &mut y);
                    masked_solve(&sub, m, &idx, &mut z);
                    schur += blk[0];
                    for k in 0..m {
                        let b = blk[(k + 1) * nb];
                        schur -= b * z[k];
                        rhs0 -= b * y[k];
                    }
                    coupling.push((y, z));
                }
                let d0 = if free[0] && schur > 0.0 {
                    rhs0 / schur
                } else {
                    0.0
                };
                r[0] = d0;
                for (i, (y, z)) in coupling.into_iter().enumerate() {
                    let base = 1 + i * m;
                    for k in 0..m {
                        r[base + k] = y[k] - z[k] * d0;
                    }
                }
            }
        }
    }

    /// Predicted daily trajectories for a decision vector, via the checked
    /// integrator.
    pub fn predict(&self, u: &[f64]) -> Result<Vec<Vec<State>>, OcpError> {
        self.check_dims(u)?;
        let days = self.grid.days();
        let mut out = Vec::with_capacity(self.scenarios.len());
        for (i, theta) in self.scenarios.thetas().enumerate() {
            let values: Vec<f64> = (0..self.layout.blocks)
                .map(|k| u[self.layout.index(i, k)])
                .collect();
            let schedule = ControlSchedule::from_values(self.grid.block_days, &values)?;
            let states = if self.grid.steps_per_day == 1 {
                simulate(&self.x0, &schedule, theta, days)?.states
            } else {
                fine_states(&self.x0, &schedule, theta, days, self.grid.steps_per_day)?
            };
            out.push(states);
        }
        Ok(out)
    }
}

fn fine_states(
    x0: &State,
    schedule: &ControlSchedule,
    theta: &Params,
    days: usize,
    spd: usize,
) -> Result<Vec<State>, ModelError> {
    let rates = Rates::from(theta);
    let h = 1.0 / spd as f64;
    let mut x = *x0;
    let mut out = vec![x];
    for day in 0..days {
        let u = schedule
            .at_day(day)
            .expect("schedule covers the horizon")
            .value();
        for _ in 0..spd {
            x = crate::model::step_with_rates(&x, u, &rates, h).map_err(|e| {
                ModelError::SimulationFailed {
                    day,
                    source: Box::new(e),
                }
            })?;
        }
        out.push(x);
    }
    Ok(out)
}

/// The Gauss-Newton model at the most recent gradient evaluation.
struct GaussNewtonModel<'a> {
    problem: &'a NlpProblem,
    model: &'a RefCell<GaussNewton>,
}

impl lbfgs::CurvatureModel for GaussNewtonModel<'_> {
    fn apply_inverse(&self, free: &[bool], d: &mut [f64]) {
        self.problem
            .apply_gauss_newton_inverse(&self.model.borrow().blocks, free, d);
    }

    fn piece(&self) -> u64 {
        self.model.borrow().piece
    }
}

/// Solves the `idx × idx` subsystem of the row-major `n × n` matrix `h`
/// against `r[idx]`, writing the solution back and zeroing the rest of `r`.
fn masked_solve(h: &[f64], n: usize, idx: &[usize], r: &mut [f64]) {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |a, b| h[idx[a] * n + idx[b]]);
    let rhs = DVector::from_iterator(k, idx.iter().map(|&j| r[j]));
    let sol = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        // Not expected for a positive definite model; fall back to the
        // diagonal.
        None => DVector::from_fn(k, |a, _| rhs[a] / sub[(a, a)].max(f64::MIN_POSITIVE)),
    };
    r[..n].iter_mut().for_each(|v| *v = 0.0);
    for (a, &j) in idx.iter().enumerate() {
        r[j] = sol[a];
    }
}

/// `(ψ, dψ/dg)` for one inequality `g <= 0`.
#[inline(always)]
fn penalty_term(mu: f64, g: f64, rho: f64) -> (f64, f64) {
    if rho == 0.0 {
        return (mu * g, mu);
    }
    let t = mu + rho * g;
    if t > 0.0 {
        ((t * t - mu * mu) / (2.0 * rho), t)
    } else {
        (-mu * mu / (2.0 * rho), 0.0)
    }
}

/// The penalty grows when an outer iteration fails to shrink the violation
/// by at least this factor.
const SUFFICIENT_REDUCTION: f64 = 0.5;

/// `(violation, objective, u, multipliers, stationarity)`.
type Iterate = (f64, f64, Vec<f64>, Vec<f64>, f64);

/// Solves the condensed problem. Deterministic for identical inputs.
pub fn solve(
    problem: &NlpProblem,
    warm_start: Option<&WarmStart>,
) -> Result<OcpSolution, OcpError> {
    let started = Instant::now();
    let cfg = &problem.config;
    let opts = &cfg.solver;
    let n = problem.num_vars();
    let nc = problem.num_constraints();
    let u_max = cfg.u_max;
    let mut evaluations = 0usize;

    // Feasibility restoration: the strongest admissible action.
    let full = vec![u_max; n];
    let (_, viol_full) = problem.evaluate(&full, None, 0.0, None, None);
    evaluations += 1;
    if viol_full > opts.tol_feas {
        debug!(target: "ocp", "infeasible: violation {viol_full:.3e} at u = u_max");
        return finish(
            problem,
            full,
            vec![0.0; nc],
            SolveStatus::Infeasible,
            viol_full,
            f64::NAN,
            Vec::new(),
            (0, 0, evaluations),
            started,
        );
    }

    // Zero cost is the global minimum whenever u = 0 is feasible.
    let zero = vec![0.0; n];
    let (_, viol_zero) = problem.evaluate(&zero, None, 0.0, None, None);
    evaluations += 1;
    if viol_zero <= opts.tol_feas {
        return finish(
            problem,
            zero,
            vec![0.0; nc],
            SolveStatus::Optimal,
            viol_zero,
            0.0,
            Vec::new(),
            (0, 0, evaluations),
            started,
        );
    }

    let mut u = match warm_start {
        Some(ws) if ws.schedules.len() == problem.scenarios.len() => problem
            .layout
            .compress(&ws.schedules, &problem.probabilities),
        _ => zero.clone(),
    };
    u.iter_mut().for_each(|v| *v = v.clamp(0.0, u_max));
    let mut mu = match warm_start.and_then(|w| w.multipliers.as_ref()) {
        Some(m) if m.len() == nc => m.clone(),
        _ => vec![0.0; nc],
    };
    let mut rho = opts.initial_penalty;
    let mut prev_violation = f64::INFINITY;
    let mut diagnostics = Vec::new();
    let mut inner_total = 0usize;
    let mut best: Option<Iterate> = None;
    let mut status = SolveStatus::MaxIter;
    let mut final_stat = f64::NAN;
    let mut final_viol = f64::NAN;
    let gauss_newton = RefCell::new(GaussNewton::default());

    for outer in 1..=opts.max_outer {
        let inner_tol = opts.tol_stat.max(1e-3 * 0.1f64.powi(outer as i32 - 1));
        let inner = BoxLbfgs {
            lo: 0.0,
            hi: u_max,
            memory: opts.lbfgs_memory,
            tol: inner_tol,
            max_iter: opts.max_inner,
        };
        let mu_ref = &mu;
        let mut f = |x: &[f64], g: Option<&mut [f64]>| -> f64 {
            match g {
                Some(g) => {
                    let mut gn = gauss_newton.borrow_mut();
                    problem
                        .evaluate(x, Some(mu_ref), rho, Some(g), Some(&mut gn))
                        .0
                }
                None => problem.evaluate(x, Some(mu_ref), rho, None, None).0,
            }
        };
        let model = GaussNewtonModel {
            problem,
            model: &gauss_newton,
        };
        let outcome = inner.minimize(&mut f, Some(&model), &mut u);
        evaluations += outcome.evaluations;
        inner_total += outcome.iterations;

        // Multiplier update from the normalised constraints at the new point.
        let g = problem.constraints(&u)?;
        evaluations += 1;
        let mut violation = 0.0f64;
        for (j, &gj) in g.iter().enumerate() {
            let bound = problem.bounds[j % problem.bounds.len()].1;
            violation = violation.max(gj * bound);
            mu[j] = (mu[j] + rho * gj).max(0.0);
        }
        let violation = violation.max(0.0);
        let stationarity = outcome.projected_gradient;
        let objective = problem.objective(&u);
        let record = OuterRecord {
            iteration: outer,
            objective,
            max_violation: violation,
            stationarity,
            step_norm: outcome.last_step,
            penalty: rho,
            inner_iterations: outcome.iterations,
        };
        debug!(
            target: "ocp",
            "outer={} objective={:.9e} violation={:.3e} stationarity={:.3e} step={:.3e} penalty={:.1e} inner={} status={:?}",
            outer, objective, violation, stationarity, outcome.last_step, rho, outcome.iterations, outcome.status
        );
        diagnostics.push(record);

        let feasible = violation <= opts.tol_feas;
        let better = match &best {
            None => true,
            Some((bv, bo, ..)) => {
                let bf = *bv <= opts.tol_feas;
                (feasible && (!bf || objective < *bo)) || (!feasible && !bf && violation < *bv)
            }
        };
        if better {
            best = Some((violation, objective, u.clone(), mu.clone(), stationarity));
        }
        if feasible && stationarity <= opts.tol_stat && outcome.status == InnerStatus::Converged {
            status = SolveStatus::Optimal;
            final_stat = stationarity;
            final_viol = violation;
            break;
        }
        if !feasible && violation > SUFFICIENT_REDUCTION * prev_violation {
            rho *= opts.penalty_growth;
        }
        prev_violation = violation;
    }

    if status != SolveStatus::Optimal {
        let (v, _, bu, bmu, st) = best.expect("at least one outer iteration");
        u = bu;
        mu = bmu;
        final_viol = v;
        final_stat = st;
    }
    let outer = diagnostics.len();
    finish(
        problem,
        u,
        mu,
        status,
        final_viol,
        final_stat,
        diagnostics,
        (outer, inner_total, evaluations),
        started,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &NlpProblem,
    u: Vec<f64>,
    multipliers: Vec<f64>,
    status: SolveStatus,
    max_violation: f64,
    stationarity: f64,
    diagnostics: Vec<OuterRecord>,
    (outer_iterations, inner_iterations, evaluations): (usize, usize, usize),
    started: Instant,
) -> Result<OcpSolution, OcpError> {
    let trajectories = problem.predict(&u)?;
    let schedules = problem.layout.expand(&u);
    Ok(OcpSolution {
        mode: problem.config.mode,
        status,
        first_action: schedules[0][0],
        objective: problem.objective(&u),
        schedules,
        trajectories,
        max_violation,
        stationarity,
        outer_iterations,
        inner_iterations,
        evaluations,
        solve_seconds: started.elapsed().as_secs_f64(),
        diagnostics,
        multipliers,
    })
}

//! SIDTHE compartmental dynamics.
//!
//! The population is split into six fractions that live on the probability
//! simplex: Susceptible, Infected (undetected), Diagnosed, Threatened
//! (hospitalised), Healed and Expired. Interventions act as a multiplicative
//! reduction `(1 - u)` of the transmission rate.
//!
//! Everything in here is a pure function of its inputs. The integrator is
//! classical RK4 with the control held constant over each step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tolerance on `|1ᵀx - 1|` when constructing a [`State`].
pub const DEFAULT_MASS_TOLERANCE: f64 = 1e-9;

/// Negative components in `[-NEGATIVE_CLAMP_TOLERANCE, 0)` produced by the
/// integrator are floating-point noise and are clamped to zero. Anything
/// below that is reported as an integration failure.
pub const NEGATIVE_CLAMP_TOLERANCE: f64 = 1e-12;

pub const COMPARTMENTS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state component {component} = {value} is outside [0, 1]")]
    ComponentOutOfRange { component: Compartment, value: f64 },
    #[error("state components sum to {sum}, expected 1 within {tolerance}")]
    NotOnSimplex { sum: f64, tolerance: f64 },
    #[error("parameter {name} = {value} must be strictly positive and finite")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("control {value} must satisfy 0 <= u < 1")]
    InvalidControl { value: f64 },
    #[error("step size {0} must be positive and finite")]
    InvalidStep(f64),
    #[error("integration produced {component} = {value} (step too large)")]
    InvalidState { component: Compartment, value: f64 },
    #[error("integration failed on day {day}: {source}")]
    SimulationFailed {
        day: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("schedule covers {covered} days but {requested} were requested")]
    ScheduleTooShort { covered: usize, requested: usize },
    #[error("schedule block length must be at least one day")]
    EmptyBlock,
}

/// Index of a compartment in the state vector `(S, I, D, T, H, E)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Compartment {
    S,
    I,
    D,
    T,
    H,
    E,
}

impl Compartment {
    pub const ALL: [Compartment; COMPARTMENTS] = [
        Compartment::S,
        Compartment::I,
        Compartment::D,
        Compartment::T,
        Compartment::H,
        Compartment::E,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Compartment::S => "S",
            Compartment::I => "I",
            Compartment::D => "D",
            Compartment::T => "T",
            Compartment::H => "H",
            Compartment::E => "E",
        }
    }
}

impl std::fmt::Display for Compartment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How to absorb the residual `1 - 1ᵀx` of an initial condition that does not
/// quite sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassRepair {
    /// Add the residual to S.
    #[default]
    Susceptible,
    /// Add the residual to H.
    Healed,
    /// Divide every component by the sum.
    Renormalize,
}

/// A point on the 6-simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct State([f64; COMPARTMENTS]);

impl State {
    pub fn new(components: [f64; COMPARTMENTS]) -> Result<Self, ModelError> {
        Self::with_tolerance(components, DEFAULT_MASS_TOLERANCE)
    }

    pub fn with_tolerance(
        components: [f64; COMPARTMENTS],
        tolerance: f64,
    ) -> Result<Self, ModelError> {
        for (c, &v) in Compartment::ALL.iter().zip(&components) {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::ComponentOutOfRange {
                    component: *c,
                    value: v,
                });
            }
        }
        let sum: f64 = components.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(ModelError::NotOnSimplex { sum, tolerance });
        }
        Ok(State(components))
    }

    /// Builds a state from components that may not sum exactly to one,
    /// moving the residual according to `repair`.
    pub fn repaired(
        mut components: [f64; COMPARTMENTS],
        repair: MassRepair,
    ) -> Result<Self, ModelError> {
        let sum: f64 = components.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(ModelError::NotOnSimplex {
                sum,
                tolerance: DEFAULT_MASS_TOLERANCE,
            });
        }
        let residual = 1.0 - sum;
        match repair {
            MassRepair::Susceptible => components[0] += residual,
            MassRepair::Healed => components[4] += residual,
            MassRepair::Renormalize => components.iter_mut().for_each(|v| *v /= sum),
        }
        Self::new(components)
    }

    /// Disease-free equilibrium.
    pub fn susceptible_only() -> Self {
        State([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    }

    /// The outbreak initial condition `(0.99, 0.008, 1.9e-4, 1e-4, 0, 0)`,
    /// whose components sum to 0.99829, repaired onto the simplex.
    pub fn outbreak(repair: MassRepair) -> Self {
        Self::repaired([0.99, 0.008, 1.9e-4, 1e-4, 0.0, 0.0], repair)
            .expect("outbreak initial condition is valid")
    }

    /// Integrator outputs are on the simplex by construction (RK4 preserves
    /// linear invariants) and clamped non-negative.
    pub(crate) fn from_integrator(components: [f64; COMPARTMENTS]) -> Self {
        State(components)
    }

    pub fn as_array(&self) -> &[f64; COMPARTMENTS] {
        &self.0
    }

    pub fn get(&self, c: Compartment) -> f64 {
        self.0[c.index()]
    }

    pub fn s(&self) -> f64 {
        self.0[0]
    }
    pub fn i(&self) -> f64 {
        self.0[1]
    }
    pub fn d(&self) -> f64 {
        self.0[2]
    }
    pub fn t(&self) -> f64 {
        self.0[3]
    }
    pub fn h(&self) -> f64 {
        self.0[4]
    }
    pub fn e(&self) -> f64 {
        self.0[5]
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<[f64; 6]> for State {
    type Error = ModelError;
    fn try_from(value: [f64; 6]) -> Result<Self, Self::Error> {
        State::new(value)
    }
}

impl From<State> for [f64; 6] {
    fn from(value: State) -> Self {
        value.0
    }
}

/// SIDTHE rates `θ = (α, γ, λ, δ, σ, τ)`, all in 1/day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Params {
    /// Transmission.
    pub alpha: f64,
    /// Diagnosis.
    pub gamma: f64,
    /// Recovery of non-hospitalised infected.
    pub lambda: f64,
    /// Aggravation (D -> T).
    pub delta: f64,
    /// Hospital recovery.
    pub sigma: f64,
    /// Mortality.
    pub tau: f64,
}

impl Params {
    pub const NAMES: [&'static str; 6] = ["alpha", "gamma", "lambda", "delta", "sigma", "tau"];

    pub fn new(
        alpha: f64,
        gamma: f64,
        lambda: f64,
        delta: f64,
        sigma: f64,
        tau: f64,
    ) -> Result<Self, ModelError> {
        Self::from_array([alpha, gamma, lambda, delta, sigma, tau])
    }

    pub fn from_array(values: [f64; 6]) -> Result<Self, ModelError> {
        for (name, &v) in Self::NAMES.iter().zip(&values) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::NonPositiveParameter { name, value: v });
            }
        }
        let [alpha, gamma, lambda, delta, sigma, tau] = values;
        Ok(Params {
            alpha,
            gamma,
            lambda,
            delta,
            sigma,
            tau,
        })
    }

    /// Nominal outbreak parameters `(0.35, 0.1, 0.09, 2e-3, 0.015, 0.01)`.
    pub fn nominal() -> Self {
        Params {
            alpha: 0.35,
            gamma: 0.1,
            lambda: 0.09,
            delta: 2e-3,
            sigma: 0.015,
            tau: 0.01,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.alpha,
            self.gamma,
            self.lambda,
            self.delta,
            self.sigma,
            self.tau,
        ]
    }

    /// Componentwise multiplication; `factors` must be positive.
    pub fn scaled(&self, factors: [f64; 6]) -> Result<Self, ModelError> {
        let mut v = self.to_array();
        v.iter_mut().zip(factors).for_each(|(p, f)| *p *= f);
        Self::from_array(v)
    }

    /// Total outflow rate of I: `γ (1 + λ / (λ + γ)) = γ (2λ + γ) / (λ + γ)`.
    pub fn infected_outflow(&self) -> f64 {
        self.gamma * (1.0 + self.lambda / (self.lambda + self.gamma))
    }
}

impl TryFrom<[f64; 6]> for Params {
    type Error = ModelError;
    fn try_from(value: [f64; 6]) -> Result<Self, Self::Error> {
        Params::from_array(value)
    }
}

impl From<Params> for [f64; 6] {
    fn from(value: Params) -> Self {
        value.to_array()
    }
}

/// Intervention severity `u ∈ [0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ControlInput(f64);

impl ControlInput {
    pub const NONE: ControlInput = ControlInput(0.0);

    pub fn new(u: f64) -> Result<Self, ModelError> {
        if (0.0..1.0).contains(&u) {
            Ok(ControlInput(u))
        } else {
            Err(ModelError::InvalidControl { value: u })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ControlInput {
    type Error = ModelError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        ControlInput::new(value)
    }
}

impl From<ControlInput> for f64 {
    fn from(value: ControlInput) -> Self {
        value.0
    }
}

/// Rate constants precomputed once per parameter vector. Both the checked
/// integrator and the optimiser's rollouts go through this, so their
/// arithmetic is identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Rates {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub sigma: f64,
    pub tau: f64,
    /// `λγ / (λ + γ)`, the I -> H flow rate.
    pub i_to_h: f64,
    /// `γ + λγ/(λ+γ)`, total outflow of I.
    pub i_out: f64,
    /// `δ + λ`, total outflow of D.
    pub d_out: f64,
    /// `σ + τ`, total outflow of T.
    pub t_out: f64,
}

impl From<&Params> for Rates {
    fn from(p: &Params) -> Self {
        let i_to_h = p.lambda * p.gamma / (p.lambda + p.gamma);
        Rates {
            alpha: p.alpha,
            gamma: p.gamma,
            lambda: p.lambda,
            delta: p.delta,
            sigma: p.sigma,
            tau: p.tau,
            i_to_h,
            i_out: p.gamma + i_to_h,
            d_out: p.delta + p.lambda,
            t_out: p.sigma + p.tau,
        }
    }
}

impl Rates {
    /// Derivatives of `(S, I, D, T)`. H and E never feed back.
    #[inline(always)]
    pub fn active(&self, u: f64, x: &[f64]) -> [f64; 4] {
        let infection = self.alpha * (1.0 - u) * x[0] * x[1];
        [
            -infection,
            infection - self.i_out * x[1],
            self.gamma * x[1] - self.d_out * x[2],
            self.delta * x[2] - self.t_out * x[3],
        ]
    }

    #[inline(always)]
    pub fn full(&self, u: f64, x: &[f64; 6]) -> [f64; 6] {
        let [ds, di, dd, dt] = self.active(u, x);
        [
            ds,
            di,
            dd,
            dt,
            self.sigma * x[3] + self.lambda * x[2] + self.i_to_h * x[1],
            self.tau * x[3],
        ]
    }
}

/// Classical RK4 step on a fixed-size vector. Kept generic over the
/// dimension so the 4-state rollout used by the optimiser performs exactly the
/// same per-component arithmetic as the full 6-state step.
#[inline(always)]
pub(crate) fn rk4_array<const N: usize>(
    x: &[f64; N],
    h: f64,
    f: impl Fn(&[f64; N]) -> [f64; N],
) -> [f64; N] {
    let half = 0.5 * h;
    let k1 = f(x);
    let x2: [f64; N] = std::array::from_fn(|j| x[j] + half * k1[j]);
    let k2 = f(&x2);
    let x3: [f64; N] = std::array::from_fn(|j| x[j] + half * k2[j]);
    let k3 = f(&x3);
    let x4: [f64; N] = std::array::from_fn(|j| x[j] + h * k3[j]);
    let k4 = f(&x4);
    let sixth = h / 6.0;
    std::array::from_fn(|j| x[j] + sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
}

/// Clamps integrator noise to zero. Returns the index of the first component
/// below `-NEGATIVE_CLAMP_TOLERANCE`, if any.
#[inline(always)]
pub(crate) fn clamp_noise(x: &mut [f64]) -> Option<usize> {
    let mut bad = None;
    for (j, v) in x.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v >= -NEGATIVE_CLAMP_TOLERANCE {
                *v = 0.0;
            } else if bad.is_none() {
                bad = Some(j);
            }
        }
    }
    bad
}

/// Right-hand side of the SIDTHE ODEs, in 1/day.
pub fn sidthe_rhs(x: &State, u: ControlInput, theta: &Params) -> [f64; 6] {
    Rates::from(theta).full(u.value(), x.as_array())
}

/// One RK4 step of length `h` days with `u` held constant.
pub fn rk4_step(x: &State, u: ControlInput, theta: &Params, h: f64) -> Result<State, ModelError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(ModelError::InvalidStep(h));
    }
    step_with_rates(x, u.value(), &Rates::from(theta), h)
}

pub(crate) fn step_with_rates(
    x: &State,
    u: f64,
    rates: &Rates,
    h: f64,
) -> Result<State, ModelError> {
    let mut next = rk4_array(x.as_array(), h, |y| rates.full(u, y));
    if let Some(j) = clamp_noise(&mut next) {
        return Err(ModelError::InvalidState {
            component: Compartment::ALL[j],
            value: next[j],
        });
    }
    Ok(State::from_integrator(next))
}

/// Piecewise-constant control over whole days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    block_days: usize,
    blocks: Vec<ControlInput>,
}

impl ControlSchedule {
    pub fn new(block_days: usize, blocks: Vec<ControlInput>) -> Result<Self, ModelError> {
        if block_days == 0 {
            return Err(ModelError::EmptyBlock);
        }
        Ok(ControlSchedule { block_days, blocks })
    }

    pub fn from_values(block_days: usize, values: &[f64]) -> Result<Self, ModelError> {
        let blocks = values
            .iter()
            .map(|&u| ControlInput::new(u))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(block_days, blocks)
    }

    pub fn constant(u: ControlInput, days: usize) -> Self {
        ControlSchedule {
            block_days: 1,
            blocks: vec![u; days],
        }
    }

    pub fn daily(values: Vec<ControlInput>) -> Self {
        ControlSchedule {
            block_days: 1,
            blocks: values,
        }
    }

    pub fn block_days(&self) -> usize {
        self.block_days
    }

    pub fn blocks(&self) -> &[ControlInput] {
        &self.blocks
    }

    pub fn covered_days(&self) -> usize {
        self.block_days * self.blocks.len()
    }

    /// Control applied during `[day, day + 1)`.
    pub fn at_day(&self, day: usize) -> Option<ControlInput> {
        self.blocks.get(day / self.block_days).copied()
    }
}

/// Daily samples of a simulated outbreak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub controls: Vec<ControlInput>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn component(&self, c: Compartment) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(move |x| x.get(c))
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory holds at least x0")
    }
}

/// Integrates `days` one-day RK4 steps from `x0` under `schedule`.
pub fn simulate(
    x0: &State,
    schedule: &ControlSchedule,
    theta: &Params,
    days: usize,
) -> Result<Trajectory, ModelError> {
    if schedule.covered_days() < days {
        return Err(ModelError::ScheduleTooShort {
            covered: schedule.covered_days(),
            requested: days,
        });
    }
    let rates = Rates::from(theta);
    let mut states = Vec::with_capacity(days + 1);
    let mut controls = Vec::with_capacity(days);
    states.push(*x0);
    let mut x = *x0;
    for day in 0..days {
        let u = schedule.at_day(day).expect("coverage checked above");
        x = step_with_rates(&x, u.value(), &rates, 1.0).map_err(|e| {
            ModelError::SimulationFailed {
                day,
                source: Box::new(e),
            }
        })?;
        states.push(x);
        controls.push(u);
    }
    Ok(Trajectory {
        times: (0..=days).map(|d| d as f64).collect(),
        states,
        controls,
    })
}

/// Susceptible fraction below which infections decay, `1/R₀` under control
/// `u`: `γ(2λ + γ) / (α (1 - u) (λ + γ))`.
pub fn r0_inverse(theta: &Params, u: ControlInput) -> f64 {
    theta.gamma * (2.0 * theta.lambda + theta.gamma)
        / (theta.alpha * (1.0 - u.value()) * (theta.lambda + theta.gamma))
}

pub type Matrix3 = [[f64; 3]; 3];

/// Linear system for `(I, D, T)` obtained by freezing S at `s0`. Since S is
/// non-increasing, its solution dominates the nonlinear one.
pub fn overapprox_matrix(s0: f64, theta: &Params, u: ControlInput) -> Matrix3 {
    let alpha_bar = theta.alpha * (1.0 - u.value());
    let i_out = theta.gamma * (2.0 * theta.lambda + theta.gamma) / (theta.lambda + theta.gamma);
    [
        [alpha_bar * s0 - i_out, 0.0, 0.0],
        [theta.gamma, -(theta.lambda + theta.delta), 0.0],
        [0.0, theta.delta, -(theta.sigma + theta.tau)],
    ]
}

fn mat_mul(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

/// `exp(m)` by scaling and squaring with a truncated Taylor series.
pub fn expm3(m: &Matrix3) -> Matrix3 {
    let norm = m
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings);
    let a: Matrix3 = std::array::from_fn(|r| std::array::from_fn(|c| m[r][c] * scale));

    let mut result: Matrix3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut term = result;
    for k in 1..=18 {
        term = mat_mul(&term, &a);
        let inv_k = 1.0 / k as f64;
        term.iter_mut().flatten().for_each(|v| *v *= inv_k);
        result
            .iter_mut()
            .flatten()
            .zip(term.iter().flatten())
            .for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

/// `exp(F t) · (I₀, D₀, T₀)` for the frozen-S linear system.
pub fn overapprox_solution(f: &Matrix3, t: f64, idt0: [f64; 3]) -> [f64; 3] {
    let ft: Matrix3 = std::array::from_fn(|r| std::array::from_fn(|c| f[r][c] * t));
    let e = expm3(&ft);
    std::array::from_fn(|r| (0..3).map(|c| e[r][c] * idt0[c]).sum())
}

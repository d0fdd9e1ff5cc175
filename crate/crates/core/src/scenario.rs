//! Finite scenario sets over the parameter vector.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariant::ParamsInterval;
use crate::model::{ModelError, Params};

/// Default cap on the number of grid scenarios.
pub const DEFAULT_MAX_SCENARIOS: usize = 1_000_000;

const PROBABILITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("grid levels must be odd and at least 1, got {0}")]
    EvenLevels(usize),
    #[error("relative perturbation {0} must lie in [0, 1)")]
    BadPerturbation(f64),
    #[error("grid of {size} scenarios exceeds the cap of {cap}")]
    TooManyScenarios { size: usize, cap: usize },
    #[error("scenario set is empty")]
    Empty,
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("probability {0} is negative or not finite")]
    BadProbability(f64),
    #[error("nominal index {index} out of range for {len} scenarios")]
    BadNominal { index: usize, len: usize },
    #[error("cannot draw {requested} scenarios from {available}")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub theta: Params,
    #[serde(rename = "p")]
    pub probability: f64,
}

/// Ordered scenarios with probabilities on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioSetRepr", into = "ScenarioSetRepr")]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    nominal: usize,
}

#[derive(Serialize, Deserialize)]
struct ScenarioSetRepr {
    scenarios: Vec<Scenario>,
    nominal: usize,
}

impl TryFrom<ScenarioSetRepr> for ScenarioSet {
    type Error = ScenarioError;
    fn try_from(r: ScenarioSetRepr) -> Result<Self, Self::Error> {
        ScenarioSet::new(r.scenarios, r.nominal)
    }
}

impl From<ScenarioSet> for ScenarioSetRepr {
    fn from(s: ScenarioSet) -> Self {
        ScenarioSetRepr {
            scenarios: s.scenarios,
            nominal: s.nominal,
        }
    }
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>, nominal: usize) -> Result<Self, ScenarioError> {
        if scenarios.is_empty() {
            return Err(ScenarioError::Empty);
        }
        if nominal >= scenarios.len() {
            return Err(ScenarioError::BadNominal {
                index: nominal,
                len: scenarios.len(),
            });
        }
        if let Some(s) = scenarios
            .iter()
            .find(|s| !(s.probability >= 0.0 && s.probability.is_finite()))
        {
            return Err(ScenarioError::BadProbability(s.probability));
        }
        let total: f64 = scenarios.iter().map(|s| s.probability).sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(ScenarioError::NotNormalized(total));
        }
        Ok(ScenarioSet { scenarios, nominal })
    }

    /// Equally likely scenarios, the first one flagged nominal.
    pub fn uniform(thetas: Vec<Params>) -> Result<Self, ScenarioError> {
        let p = uniform_probabilities(thetas.len().max(1));
        let scenarios = thetas
            .into_iter()
            .zip(p)
            .map(|(theta, probability)| Scenario { theta, probability })
            .collect();
        Self::new(scenarios, 0)
    }

    pub fn single(theta: Params) -> Self {
        ScenarioSet {
            scenarios: vec![Scenario {
                theta,
                probability: 1.0,
            }],
            nominal: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn get(&self, index: usize) -> Option<&Scenario> {
        self.scenarios.get(index)
    }

    pub fn nominal_index(&self) -> usize {
        self.nominal
    }

    pub fn nominal(&self) -> &Scenario {
        &self.scenarios[self.nominal]
    }

    pub fn thetas(&self) -> impl Iterator<Item = &Params> {
        self.scenarios.iter().map(|s| &s.theta)
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.scenarios.iter().map(|s| s.probability)
    }

    /// The set reduced to its nominal scenario with probability one.
    pub fn nominal_only(&self) -> ScenarioSet {
        ScenarioSet::single(self.nominal().theta)
    }

    /// Uniform draw of `n` scenarios without replacement. The nominal
    /// scenario is always kept; order follows the original indices and
    /// probabilities are reset to uniform.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<ScenarioSet, ScenarioError> {
        if n == 0 {
            return Err(ScenarioError::Empty);
        }
        if n > self.len() {
            return Err(ScenarioError::SubsampleTooLarge {
                requested: n,
                available: self.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let others: Vec<usize> = (0..self.len()).filter(|&k| k != self.nominal).collect();
        let mut picked: Vec<usize> = sample(&mut rng, others.len(), n - 1)
            .into_iter()
            .map(|k| others[k])
            .collect();
        picked.push(self.nominal);
        picked.sort_unstable();
        let nominal = picked.iter().position(|&k| k == self.nominal).unwrap();
        let thetas: Vec<Params> = picked.iter().map(|&k| self.scenarios[k].theta).collect();
        let mut set = ScenarioSet::uniform(thetas)?;
        set.nominal = nominal;
        Ok(set)
    }
}

pub fn uniform_probabilities(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Which of the six parameters are perturbed in a grid.
pub type ParamMask = [bool; 6];

pub const ALL_PARAMS: ParamMask = [true; 6];

/// Full factorial grid with `levels` evenly spaced multiplicative factors in
/// `[1 - rel, 1 + rel]` on every parameter, ordered lexicographically with α
/// varying slowest.
pub fn grid_scenarios(
    nominal: &Params,
    rel_perturbation: f64,
    levels: usize,
) -> Result<ScenarioSet, ScenarioError> {
    grid_scenarios_masked(
        nominal,
        rel_perturbation,
        levels,
        ALL_PARAMS,
        DEFAULT_MAX_SCENARIOS,
    )
}

/// Grid over the parameters selected by `mask`; the others stay nominal.
pub fn grid_scenarios_masked(
    nominal: &Params,
    rel_perturbation: f64,
    levels: usize,
    mask: ParamMask,
    cap: usize,
) -> Result<ScenarioSet, ScenarioError> {
    if levels == 0 || levels.is_multiple_of(2) {
        return Err(ScenarioError::EvenLevels(levels));
    }
    if !(0.0..1.0).contains(&rel_perturbation) {
        return Err(ScenarioError::BadPerturbation(rel_perturbation));
    }
    let varying: Vec<usize> = (0..6).filter(|&k| mask[k]).collect();
    let size = levels
        .checked_pow(varying.len() as u32)
        .filter(|&s| s <= cap)
        .ok_or(ScenarioError::TooManyScenarios {
            size: levels.saturating_pow(varying.len() as u32),
            cap,
        })?;
    let factors: Vec<f64> = if levels == 1 {
        vec![1.0]
    } else {
        let step = 2.0 * rel_perturbation / (levels - 1) as f64;
        let center = (levels - 1) / 2;
        (0..levels)
            .map(|l| 1.0 + (l as f64 - center as f64) * step)
            .collect()
    };
    let base = nominal.to_array();
    let mut thetas = Vec::with_capacity(size);
    for idx in 0..size {
        let mut rem = idx;
        let mut v = base;
        for &k in varying.iter().rev() {
            v[k] = base[k] * factors[rem % levels];
            rem /= levels;
        }
        thetas.push(Params::from_array(v)?);
    }
    let center = (levels - 1) / 2;
    let nominal_index = (0..varying.len()).fold(0, |acc, _| acc * levels + center);
    let mut set = ScenarioSet::uniform(thetas)?;
    set.nominal = nominal_index;
    Ok(set)
}

/// Componentwise extrema of the scenario parameters.
pub fn params_interval(set: &ScenarioSet) -> ParamsInterval {
    let first = set.scenarios[0].theta.to_array();
    let (lo, hi) = set.thetas().fold((first, first), |(mut lo, mut hi), t| {
        for (k, v) in t.to_array().into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
        (lo, hi)
    });
    ParamsInterval::new(
        Params::from_array(lo).expect("scenario parameters are positive"),
        Params::from_array(hi).expect("scenario parameters are positive"),
    )
    .expect("lo <= hi by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_729_scenarios_with_uniform_weights() {
        let set = grid_scenarios(&Params::nominal(), 0.05, 3).unwrap();
        assert_eq!(set.len(), 729);
        let total: f64 = set.probabilities().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(set.nominal().theta, Params::nominal());
        assert_eq!(set.nominal_index(), 364);
    }

    #[test]
    fn alpha_levels_and_ordering() {
        let set = grid_scenarios(&Params::nominal(), 0.05, 3).unwrap();
        let alphas = [0.35 * 0.95, 0.35, 0.35 * 1.05];
        for s in set.scenarios() {
            assert!(alphas.iter().any(|a| (a - s.theta.alpha).abs() < 1e-15));
        }
        assert!((alphas[0] - 0.3325).abs() < 1e-15);
        assert!((alphas[2] - 0.3675).abs() < 1e-15);
        // α varies slowest, τ fastest.
        assert_eq!(set.scenarios()[0].theta.alpha, alphas[0]);
        assert_eq!(set.scenarios()[242].theta.alpha, alphas[0]);
        assert_eq!(set.scenarios()[243].theta.alpha, alphas[1]);
        assert!(set.scenarios()[1].theta.tau > set.scenarios()[0].theta.tau);
    }

    #[test]
    fn single_level_grid_is_nominal() {
        let set = grid_scenarios(&Params::nominal(), 0.05, 1).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.scenarios()[0].probability, 1.0);
        assert_eq!(set.scenarios()[0].theta, Params::nominal());
    }

    #[test]
    fn rejects_even_levels_and_oversized_grids() {
        assert_eq!(
            grid_scenarios(&Params::nominal(), 0.05, 2).unwrap_err(),
            ScenarioError::EvenLevels(2)
        );
        assert!(matches!(
            grid_scenarios_masked(&Params::nominal(), 0.05, 3, ALL_PARAMS, 100),
            Err(ScenarioError::TooManyScenarios {
                size: 729,
                cap: 100
            })
        ));
        assert!(grid_scenarios(&Params::nominal(), 1.0, 3).is_err());
    }

    #[test]
    fn uniform_probability_vectors() {
        assert_eq!(uniform_probabilities(1), vec![1.0]);
        assert_eq!(uniform_probabilities(4), vec![0.25; 4]);
        let p = uniform_probabilities(729);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v == 1.0 / 729.0));
    }

    #[test]
    fn interval_of_full_grid() {
        let set = grid_scenarios(&Params::nominal(), 0.05, 3).unwrap();
        let iv = params_interval(&set);
        let lo = Params::nominal().scaled([0.95; 6]).unwrap().to_array();
        let hi = Params::nominal().scaled([1.05; 6]).unwrap().to_array();
        for k in 0..6 {
            assert!((iv.lower().to_array()[k] - lo[k]).abs() < 1e-15);
            assert!((iv.upper().to_array()[k] - hi[k]).abs() < 1e-15);
        }
        assert!(set.thetas().all(|t| iv.contains(t)));
    }

    #[test]
    fn singleton_interval_is_degenerate() {
        let set = ScenarioSet::single(Params::nominal());
        let iv = params_interval(&set);
        assert_eq!(iv.lower(), iv.upper());
    }

    #[test]
    fn masked_subgrid_keeps_other_parameters_nominal() {
        let mask = [true, false, false, true, true, false];
        let set = grid_scenarios_masked(&Params::nominal(), 0.05, 3, mask, 1000).unwrap();
        assert_eq!(set.len(), 27);
        assert_eq!(set.nominal().theta, Params::nominal());
        assert!(set
            .thetas()
            .all(|t| t.gamma == 0.1 && t.lambda == 0.09 && t.tau == 0.01));
    }

    #[test]
    fn subsample_is_seeded_and_keeps_nominal() {
        let set = grid_scenarios(&Params::nominal(), 0.05, 3).unwrap();
        let a = set.subsample(30, 11).unwrap();
        let b = set.subsample(30, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(a.nominal().theta, Params::nominal());
        assert!(set.subsample(800, 1).is_err());
    }

    #[test]
    fn set_validation() {
        let s = Scenario {
            theta: Params::nominal(),
            probability: 0.5,
        };
        assert_eq!(
            ScenarioSet::new(vec![s], 0).unwrap_err(),
            ScenarioError::NotNormalized(0.5)
        );
        assert_eq!(
            ScenarioSet::new(vec![], 0).unwrap_err(),
            ScenarioError::Empty
        );
        assert!(ScenarioSet::new(vec![s, s], 2).is_err());
    }

    #[test]
    fn json_shape() {
        let set = grid_scenarios(&Params::nominal(), 0.05, 1).unwrap();
        let v = serde_json::to_value(set.scenarios()[0]).unwrap();
        assert_eq!(v["theta"].as_array().unwrap().len(), 6);
        assert_eq!(v["p"].as_f64().unwrap(), 1.0);
    }
}

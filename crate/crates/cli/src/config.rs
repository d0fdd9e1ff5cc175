//! Experiment configuration: one JSON document with the sections `model`,
//! `scenarios`, `ocp`, `experiment` and `output`. Every field has a default,
//! so `{}` is the main outbreak run.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sidthe_core::{
    params_interval, robust_invariant_box, Compartment, InvariantBox, MassRepair, Mode, OcpConfig,
    Params, Scenario, ScenarioSet, ScenarioSettings, State,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub scenarios: ScenarioSettings,
    pub ocp: OcpConfig,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Plant parameters for `--plants nominal` and `simulate`.
    pub theta: Params,
    /// Initial compartments; the residual mass is moved by `mass_repair`.
    pub x0: [f64; 6],
    pub mass_repair: MassRepair,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            theta: Params::nominal(),
            x0: [0.99, 0.008, 1.9e-4, 1e-4, 0.0, 0.0],
            mass_repair: MassRepair::Susceptible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MpcMode {
    Robust,
    Recourse,
    Nominal,
    /// Recourse with S, I, D and T kept inside the safe box.
    SafeSet,
}

impl MpcMode {
    pub fn ocp_mode(self) -> Mode {
        match self {
            MpcMode::Robust => Mode::Robust,
            MpcMode::Recourse | MpcMode::SafeSet => Mode::Recourse,
            MpcMode::Nominal => Mode::Nominal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlantChoice {
    /// `model.theta`.
    Nominal,
    /// Every scenario of the controller's set.
    Grid,
    /// The interval corner with the highest uncontrolled T peak.
    Adverse,
    /// Parameter vectors read from `experiment.plants_file`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenLoop {
    pub block_days: usize,
    /// Block values; the last one is held to the end of the run.
    pub controls: Vec<f64>,
}

impl Default for OpenLoop {
    fn default() -> Self {
        OpenLoop {
            block_days: 14,
            controls: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: MpcMode,
    pub plants: PlantChoice,
    pub plants_file: Option<PathBuf>,
    pub days: usize,
    pub seed: u64,
    /// Plant excursions above a bound by more than this are reported.
    pub violation_tolerance: f64,
    /// Box for `safe-set` mode; derived from the scenario grid when absent.
    pub safe_box: Option<InvariantBox>,
    /// Decision days whose predictions are exported.
    pub snapshot_days: Vec<usize>,
    /// Number of scenarios kept in each exported snapshot.
    pub snapshot_subset: usize,
    pub open_loop: OpenLoop,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: MpcMode::Recourse,
            plants: PlantChoice::Nominal,
            plants_file: None,
            days: 280,
            seed: 0,
            violation_tolerance: 1e-6,
            safe_box: None,
            snapshot_days: vec![98],
            snapshot_subset: 25,
            open_loop: OpenLoop::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("sidthe-out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<MpcMode>,
    pub plants: Option<PlantChoice>,
    pub plants_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub horizon_blocks: Option<usize>,
    pub days: Option<usize>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Config(format!(
                "{}: field `{field}`: {}",
                path.display(),
                e.inner()
            ))
        })
    }

    /// Applies the overrides and checks the result.
    pub fn resolve(mut self, o: &Overrides) -> Result<Config, CliError> {
        if let Some(m) = o.mode {
            self.experiment.mode = m;
        }
        if let Some(p) = o.plants {
            self.experiment.plants = p;
        }
        if let Some(f) = &o.plants_file {
            self.experiment.plants_file = Some(f.clone());
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.experiment.seed = s;
        }
        if let Some(n) = o.horizon_blocks {
            self.ocp.horizon_blocks = n;
        }
        if let Some(d) = o.days {
            self.experiment.days = d;
        }
        self.ocp.mode = self.experiment.mode.ocp_mode();
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.ocp
            .validate()
            .map_err(|e| CliError::Config(format!("ocp: {e}")))?;
        self.x0()?;
        if !(self.experiment.violation_tolerance >= 0.0) {
            return bad("experiment.violation_tolerance must be >= 0".into());
        }
        if self.experiment.plants == PlantChoice::File && self.experiment.plants_file.is_none() {
            return bad("--plants file needs experiment.plants_file or --plants-file".into());
        }
        if self.experiment.open_loop.block_days == 0
            || self.experiment.open_loop.controls.is_empty()
        {
            return bad(
                "experiment.open_loop needs block_days >= 1 and at least one control".into(),
            );
        }
        if let Some(u) = self
            .experiment
            .open_loop
            .controls
            .iter()
            .find(|u| !(0.0..1.0).contains(*u))
        {
            return bad(format!(
                "experiment.open_loop.controls: {u} is outside [0, 1)"
            ));
        }
        if self.experiment.mode == MpcMode::SafeSet && self.t_max().is_none() {
            return bad("safe-set mode needs a T bound in ocp.state_bounds".into());
        }
        Ok(())
    }

    pub fn x0(&self) -> Result<State, CliError> {
        State::repaired(self.model.x0, self.model.mass_repair)
            .map_err(|e| CliError::Config(format!("model.x0: {e}")))
    }

    pub fn t_max(&self) -> Option<f64> {
        self.ocp
            .state_bounds
            .iter()
            .find(|b| b.compartment == Compartment::T)
            .map(|b| b.max)
    }

    pub fn scenario_set(&self) -> Result<ScenarioSet, CliError> {
        self.scenarios
            .build(self.experiment.seed)
            .map_err(|e| CliError::Config(format!("scenarios: {e}")))
    }

    /// The full grid, ignoring any subsampling.
    pub fn full_grid(&self) -> Result<ScenarioSet, CliError> {
        let settings = ScenarioSettings {
            subsample: None,
            ..self.scenarios.clone()
        };
        settings
            .build(self.experiment.seed)
            .map_err(|e| CliError::Config(format!("scenarios: {e}")))
    }

    pub fn safe_box(&self) -> Result<InvariantBox, CliError> {
        if let Some(b) = self.experiment.safe_box {
            return Ok(b);
        }
        let t_max = self
            .t_max()
            .ok_or_else(|| CliError::Config("no T bound in ocp.state_bounds".into()))?;
        let grid = self.full_grid()?;
        Ok(robust_invariant_box(
            &params_interval(&grid),
            self.ocp.u_max,
            t_max,
        ))
    }
}

/// Accepted shapes for a plants file.
#[derive(Deserialize)]
#[serde(untagged)]
enum PlantsFile {
    Thetas(Vec<Params>),
    Scenarios(Vec<Scenario>),
    Set(ScenarioSet),
}

pub fn read_plants_file(path: &Path) -> Result<Vec<Params>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read plants file {}: {e}", path.display()))
    })?;
    let parsed: PlantsFile = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!(
            "{}: expected an array of 6-element parameter vectors or of {{theta, p}} records: {e}",
            path.display()
        ))
    })?;
    let plants: Vec<Params> = match parsed {
        PlantsFile::Thetas(t) => t,
        PlantsFile::Scenarios(s) => s.into_iter().map(|s| s.theta).collect(),
        PlantsFile::Set(s) => s.thetas().copied().collect(),
    };
    if plants.is_empty() {
        return Err(CliError::Config(format!("{}: no plants", path.display())));
    }
    Ok(plants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.experiment.days, 280);
        assert_eq!(c.ocp.horizon_blocks, 7);
        assert_eq!(c.t_max(), Some(0.002));
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"experiment": {"dayz": 3}}"#).unwrap();
        let err = Config::load(Some(&p)).unwrap_err().to_string();
        assert!(err.contains("dayz"), "{err}");
        std::fs::write(&p, r#"{"experiment": {"days": "many"}}"#).unwrap();
        let err = Config::load(Some(&p)).unwrap_err().to_string();
        assert!(err.contains("experiment.days"), "{err}");
    }

    #[test]
    fn overrides_win_and_set_the_solver_mode() {
        let o = Overrides {
            mode: Some(MpcMode::SafeSet),
            days: Some(28),
            horizon_blocks: Some(3),
            ..Overrides::default()
        };
        let c = Config::default().resolve(&o).unwrap();
        assert_eq!(c.experiment.days, 28);
        assert_eq!(c.ocp.horizon_blocks, 3);
        assert_eq!(c.ocp.mode, Mode::Recourse);
        let b = c.safe_box().unwrap();
        assert!((b.i_max - 0.0188).abs() < 1e-4);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut c = Config::default();
        c.experiment.open_loop.controls = vec![1.5];
        assert!(matches!(
            c.resolve(&Overrides::default()),
            Err(CliError::Config(_))
        ));
        let o = Overrides {
            plants: Some(PlantChoice::File),
            ..Overrides::default()
        };
        assert!(Config::default().resolve(&o).is_err());
    }
}

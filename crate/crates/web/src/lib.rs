//! Browser bindings. Every export takes plain numbers or strings and returns
//! a JSON document; failures come back as `{"error": "..."}`.

use serde::Serialize;
use sidthe_core::{
    adverse_corner, invariant_box, params_interval, r0_inverse, robust_invariant_box,
    run_closed_loop, simulate, Compartment, ControlInput, ControlSchedule, ExperimentConfig,
    InvariantBox, MassRepair, Mode, OcpConfig, Params, PredictionCapture, ScenarioSettings, State,
    StateBound,
};
use wasm_bindgen::prelude::wasm_bindgen;

/// Scenario grid used by the demo controller: α, δ and σ on three levels.
const DEMO_MASK: [bool; 6] = [true, false, false, true, true, false];

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    let doc = match r {
        Ok(v) => serde_json::to_value(v).map_err(|e| e.to_string()),
        Err(e) => Err(e),
    };
    match doc {
        Ok(v) => v.to_string(),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct Series {
    pub days: Vec<usize>,
    pub s: Vec<f64>,
    pub i: Vec<f64>,
    pub d: Vec<f64>,
    pub t: Vec<f64>,
    pub h: Vec<f64>,
    pub e: Vec<f64>,
}

impl Series {
    fn from_states(states: &[State]) -> Series {
        let col = |c: Compartment| states.iter().map(|x| x.get(c)).collect();
        Series {
            days: (0..states.len()).collect(),
            s: col(Compartment::S),
            i: col(Compartment::I),
            d: col(Compartment::D),
            t: col(Compartment::T),
            h: col(Compartment::H),
            e: col(Compartment::E),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OpenLoop {
    pub u: f64,
    pub r0_inverse: f64,
    pub peak_t: f64,
    pub peak_day: usize,
    pub series: Series,
}

pub fn open_loop(u: f64, days: usize) -> Result<OpenLoop, String> {
    let input = ControlInput::new(u).map_err(|e| e.to_string())?;
    let theta = Params::nominal();
    let x0 = State::outbreak(MassRepair::Susceptible);
    let tr = simulate(&x0, &ControlSchedule::constant(input, days), &theta, days)
        .map_err(|e| e.to_string())?;
    let (peak_day, peak_t) =
        tr.component(Compartment::T)
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |a, (d, t)| if t > a.1 { (d, t) } else { a },
            );
    Ok(OpenLoop {
        u,
        r0_inverse: r0_inverse(&theta, input),
        peak_t,
        peak_day,
        series: Series::from_states(&tr.states),
    })
}

#[derive(Debug, Serialize)]
pub struct Boxes {
    pub nominal: InvariantBox,
    pub robust: InvariantBox,
}

pub fn boxes(rel: f64, u_max: f64, t_max: f64) -> Result<Boxes, String> {
    if !(0.0..1.0).contains(&u_max) {
        return Err(format!("u_max = {u_max} is outside [0, 1)"));
    }
    if !(t_max > 0.0 && t_max <= 1.0) {
        return Err(format!("t_max = {t_max} is outside (0, 1]"));
    }
    let settings = ScenarioSettings {
        rel_perturbation: rel,
        ..ScenarioSettings::default()
    };
    let grid = settings.build(0).map_err(|e| e.to_string())?;
    Ok(Boxes {
        nominal: invariant_box(&Params::nominal(), u_max, t_max),
        robust: robust_invariant_box(&params_interval(&grid), u_max, t_max),
    })
}

#[derive(Debug, Serialize)]
pub struct MpcDemo {
    pub mode: Mode,
    pub plant: Params,
    pub t_max: f64,
    pub cumulative_cost: f64,
    pub violation_days: usize,
    pub controls: Vec<f64>,
    pub series: Series,
}

pub fn mpc_demo(mode: &str, plant: &str, days: usize, t_max: f64) -> Result<MpcDemo, String> {
    let mode = match mode {
        "robust" => Mode::Robust,
        "recourse" => Mode::Recourse,
        "nominal" => Mode::Nominal,
        other => return Err(format!("unknown mode `{other}`")),
    };
    let scenarios = ScenarioSettings {
        perturbed: DEMO_MASK,
        ..ScenarioSettings::default()
    };
    let plant = match plant {
        "nominal" => Params::nominal(),
        "adverse" => adverse_corner(&scenarios.nominal, scenarios.rel_perturbation, days),
        other => return Err(format!("unknown plant `{other}`")),
    };
    let cfg = ExperimentConfig {
        plant,
        controller: OcpConfig {
            mode,
            state_bounds: vec![StateBound {
                compartment: Compartment::T,
                max: t_max,
            }],
            ..OcpConfig::default()
        },
        scenarios,
        days,
        capture: PredictionCapture::None,
        ..ExperimentConfig::default()
    };
    let log = run_closed_loop(&cfg).map_err(|e| e.to_string())?;
    let mut violation_days: Vec<usize> = log.violations.iter().map(|v| v.day).collect();
    violation_days.dedup();
    Ok(MpcDemo {
        mode,
        plant,
        t_max,
        cumulative_cost: log.cumulative_cost(),
        violation_days: violation_days.len(),
        controls: log.daily_controls.clone(),
        series: Series::from_states(&log.states),
    })
}

/// Uncontrolled or constant-control outbreak under the nominal parameters.
#[wasm_bindgen]
pub fn simulate_json(u: f64, days: u32) -> String {
    to_json(open_loop(u, days as usize))
}

/// Nominal and robust invariant boxes for a ±`rel` parameter band.
#[wasm_bindgen]
pub fn invariant_boxes_json(rel: f64, u_max: f64, t_max: f64) -> String {
    to_json(boxes(rel, u_max, t_max))
}

/// Closed-loop run with a 27-scenario controller.
#[wasm_bindgen]
pub fn mpc_json(mode: &str, plant: &str, days: u32, t_max: f64) -> String {
    to_json(mpc_demo(mode, plant, days as usize, t_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn simulation_export_has_one_entry_per_day() {
        let v: Value = serde_json::from_str(&simulate_json(0.0, 100)).unwrap();
        assert_eq!(v["series"]["t"].as_array().unwrap().len(), 101);
        assert!(v["peak_t"].as_f64().unwrap() > 0.0);
        let err: Value = serde_json::from_str(&simulate_json(1.5, 10)).unwrap();
        assert!(err["error"].is_string());
    }

    #[test]
    fn stronger_control_lowers_the_peak() {
        let a = open_loop(0.0, 300).unwrap();
        let b = open_loop(0.4, 300).unwrap();
        assert!(b.peak_t < a.peak_t);
        assert!(b.r0_inverse > a.r0_inverse);
    }

    #[test]
    fn zero_band_gives_equal_boxes() {
        let b = boxes(0.0, 0.75, 0.002).unwrap();
        assert_eq!(b.nominal, b.robust);
        let w = boxes(0.05, 0.75, 0.002).unwrap();
        assert!(w.robust.i_max < w.nominal.i_max);
        assert!(boxes(0.05, 1.0, 0.002).is_err());
    }

    #[test]
    fn demo_controller_holds_the_bound_on_the_nominal_plant() {
        let r = mpc_demo("recourse", "nominal", 56, 0.002).unwrap();
        assert_eq!(r.series.t.len(), 57);
        assert_eq!(r.violation_days, 0);
        assert!(r.series.t.iter().all(|&t| t <= 0.002 + 1e-9));
        assert!(mpc_demo("greedy", "nominal", 14, 0.002).is_err());
    }
}

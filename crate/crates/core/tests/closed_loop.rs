use sidthe_core::{
    run_batch, run_closed_loop, snapshot_predictions, Compartment, ExperimentConfig, Mode,
    OcpConfig, Params, PredictionCapture, ScenarioSettings, SolveStatus, StateBound,
};

fn small(mode: Mode, days: usize) -> ExperimentConfig {
    ExperimentConfig {
        controller: OcpConfig {
            mode,
            ..OcpConfig::default()
        },
        scenarios: ScenarioSettings {
            perturbed: [true, false, false, true, true, false],
            ..ScenarioSettings::default()
        },
        days,
        ..ExperimentConfig::default()
    }
}

#[test]
fn replay_reproduces_recorded_states() {
    let log = run_closed_loop(&small(Mode::Recourse, 112)).unwrap();
    assert_eq!(log.states.len(), 113);
    assert_eq!(log.daily_controls.len(), 112);
    assert_eq!(log.applied.len(), 8);
    let replayed = log.replay().unwrap();
    for (a, b) in replayed.iter().zip(&log.states) {
        for k in 0..6 {
            assert!((a.as_array()[k] - b.as_array()[k]).abs() <= 1e-12);
        }
    }
    assert!(log.violations.is_empty());
    assert!(log.solves.iter().all(|s| s.status == SolveStatus::Optimal));
}

#[test]
fn loose_capacity_needs_no_intervention() {
    let mut cfg = small(Mode::Nominal, 280);
    cfg.controller.state_bounds = vec![StateBound {
        compartment: Compartment::T,
        max: 0.5,
    }];
    let log = run_closed_loop(&cfg).unwrap();
    assert!(log.daily_controls.iter().all(|&u| u == 0.0));
    assert!(log.max_of(Compartment::T) < 0.1);
    assert_eq!(log.cumulative_cost(), 0.0);
}

#[test]
fn snapshots_start_at_the_measured_state_and_thin_by_stride() {
    let log = run_closed_loop(&small(Mode::Recourse, 42)).unwrap();
    let first = snapshot_predictions(&log, 0, None).unwrap();
    assert_eq!(first.trajectories.len(), 27);
    assert!(first.trajectories.iter().all(|tr| tr[0] == log.states[0]));
    let day14 = snapshot_predictions(&log, 14, None).unwrap();
    assert!(day14.trajectories.iter().all(|tr| tr[0] == log.states[14]));
    let thin = snapshot_predictions(&log, 14, Some(5)).unwrap();
    assert_eq!(thin.scenario_indices.len(), 5);
    for (k, &i) in thin.scenario_indices.iter().enumerate() {
        assert_eq!(thin.trajectories[k], day14.trajectories[i]);
        assert_eq!(thin.schedules[k], day14.schedules[i]);
    }
    assert!(snapshot_predictions(&log, 7, None).is_err());
}

#[test]
fn capture_setting_limits_stored_predictions() {
    let mut cfg = small(Mode::Robust, 42);
    cfg.capture = PredictionCapture::Days(vec![14]);
    let log = run_closed_loop(&cfg).unwrap();
    assert_eq!(
        log.predictions.keys().copied().collect::<Vec<_>>(),
        vec![14]
    );
}

#[test]
fn batches_preserve_order_and_are_deterministic() {
    assert!(run_batch(&[]).is_empty());
    let a = small(Mode::Recourse, 56);
    let mut b = small(Mode::Recourse, 56);
    b.plant = Params::nominal()
        .scaled([1.05, 0.95, 0.95, 1.05, 0.95, 1.0])
        .unwrap();
    let logs = run_batch(&[a.clone(), b.clone(), a.clone()]);
    let logs: Vec<_> = logs.into_iter().map(Result::unwrap).collect();
    assert_eq!(logs[0].plant, a.plant);
    assert_eq!(logs[1].plant, b.plant);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&logs[0].daily_controls), bits(&logs[2].daily_controls));
    assert_eq!(logs[0].states, logs[2].states);
}

#[test]
fn partial_final_block_is_truncated() {
    let log = run_closed_loop(&small(Mode::Nominal, 30)).unwrap();
    assert_eq!(log.days(), 28);
}

#[test]
fn log_serialises_to_json() {
    let log = run_closed_loop(&small(Mode::Nominal, 28)).unwrap();
    let json = serde_json::to_value(&log).unwrap();
    assert_eq!(json["mode"], "nominal");
    assert_eq!(json["states"].as_array().unwrap().len(), 29);
    assert_eq!(json["states"][0].as_array().unwrap().len(), 6);
}

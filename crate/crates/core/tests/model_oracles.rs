use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidthe_core::model::{expm3, overapprox_solution, Matrix3};
use sidthe_core::{
    overapprox_matrix, r0_inverse, rk4_step, sidthe_rhs, simulate, Compartment, ControlInput,
    ControlSchedule, MassRepair, Params, State,
};

fn x0() -> State {
    State::outbreak(MassRepair::Susceptible)
}

fn u(v: f64) -> ControlInput {
    ControlInput::new(v).unwrap()
}

/// Plain RK4 on raw arrays with its own right-hand side, written out from
/// the ODEs rather than taken from the crate.
fn reference_rhs(x: &[f64; 6], u: f64, p: &Params) -> [f64; 6] {
    let [s, i, d, t, _, _] = *x;
    let to_h = p.lambda * p.gamma / (p.lambda + p.gamma);
    let infection = p.alpha * (1.0 - u) * s * i;
    [
        -infection,
        infection - p.gamma * i - to_h * i,
        p.gamma * i - (p.lambda + p.delta) * d,
        p.delta * d - (p.sigma + p.tau) * t,
        p.sigma * t + p.lambda * d + to_h * i,
        p.tau * t,
    ]
}

fn reference_integrate(x: [f64; 6], u: f64, p: &Params, days: f64, steps: usize) -> [f64; 6] {
    let h = days / steps as f64;
    let mut x = x;
    let add = |a: &[f64; 6], b: &[f64; 6], c: f64| -> [f64; 6] {
        std::array::from_fn(|k| a[k] + c * b[k])
    };
    for _ in 0..steps {
        let k1 = reference_rhs(&x, u, p);
        let k2 = reference_rhs(&add(&x, &k1, h / 2.0), u, p);
        let k3 = reference_rhs(&add(&x, &k2, h / 2.0), u, p);
        let k4 = reference_rhs(&add(&x, &k3, h), u, p);
        x = std::array::from_fn(|k| x[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]));
    }
    x
}

fn random_simplex(rng: &mut ChaCha8Rng, s_min: f64) -> State {
    let s = rng.random_range(s_min..1.0);
    let rest = 1.0 - s;
    let w: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let total: f64 = w.iter().sum();
    let mut v = [s, 0.0, 0.0, 0.0, 0.0, 0.0];
    for k in 0..5 {
        v[k + 1] = rest * w[k] / total;
    }
    State::with_tolerance(v, 1e-12).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, spread: f64) -> Params {
    let f: [f64; 6] = std::array::from_fn(|_| rng.random_range(1.0 - spread..1.0 + spread));
    Params::nominal().scaled(f).unwrap()
}

#[test]
fn crate_rhs_agrees_with_reference_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let x = random_simplex(&mut rng, 0.0);
        let p = random_params(&mut rng, 0.5);
        let uv = rng.random_range(0.0..0.75);
        let a = sidthe_rhs(&x, u(uv), &p);
        let b = reference_rhs(x.as_array(), uv, &p);
        for k in 0..6 {
            assert!(
                (a[k] - b[k]).abs() <= 1e-15,
                "component {k}: {} vs {}",
                a[k],
                b[k]
            );
        }
    }
}

#[test]
fn outbreak_derivative_by_hand() {
    let p = Params::nominal();
    let x = x0();
    let f = sidthe_rhs(&x, ControlInput::NONE, &p);
    let s = x.s();
    assert!((f[0] - (-0.35 * s * 0.008)).abs() < 1e-15);
    let i_dot = 0.35 * s * 0.008 - 0.1 * (1.0 + 0.09 / 0.19) * 0.008;
    assert!((f[1] - i_dot).abs() < 1e-15);
    // Unrepaired S gives the headline number.
    assert!((0.35 * 0.99 * 0.008 - 2.772e-3f64).abs() < 1e-15);
}

#[test]
fn one_day_step_matches_fine_integration() {
    let p = Params::nominal();
    let coarse = rk4_step(&x0(), ControlInput::NONE, &p, 1.0).unwrap();
    let fine = reference_integrate(*x0().as_array(), 0.0, &p, 1.0, 1000);
    for k in 0..6 {
        assert!(
            (coarse.as_array()[k] - fine[k]).abs() <= 1e-6,
            "component {k}: {} vs {}",
            coarse.as_array()[k],
            fine[k]
        );
    }
}

#[test]
fn daily_trajectory_tracks_fine_integration() {
    let p = Params::nominal();
    let days = 200;
    let tr = simulate(
        &x0(),
        &ControlSchedule::constant(ControlInput::NONE, days),
        &p,
        days,
    )
    .unwrap();
    let mut fine = *x0().as_array();
    for day in 0..days {
        fine = reference_integrate(fine, 0.0, &p, 1.0, 200);
        let coarse = tr.states[day + 1].as_array();
        for k in 0..6 {
            assert!(
                (coarse[k] - fine[k]).abs() <= 1e-5,
                "day {day} component {k}"
            );
        }
    }
}

#[test]
fn uncontrolled_outbreak_burns_out_below_threshold() {
    let p = Params::nominal();
    let days = 200;
    let tr = simulate(
        &x0(),
        &ControlSchedule::constant(ControlInput::NONE, days),
        &p,
        days,
    )
    .unwrap();
    let threshold = r0_inverse(&p, ControlInput::NONE);
    assert!((threshold - 0.1 * 0.28 / (0.35 * 0.19)).abs() < 1e-15);
    let i: Vec<f64> = tr.component(Compartment::I).collect();
    let peak = i
        .iter()
        .enumerate()
        .fold((0, 0.0), |m, (k, &v)| if v > m.1 { (k, v) } else { m })
        .0;
    assert!(peak > 0 && peak < days);
    assert!(i[days] < i[peak]);
    assert!(tr.last().s() < threshold);
}

#[test]
fn full_intervention_makes_infections_decrease_from_day_zero() {
    let p = Params::nominal();
    let f = sidthe_rhs(&x0(), u(0.75), &p);
    assert!(f[1] < 0.0);
    let days = 200;
    let tr = simulate(&x0(), &ControlSchedule::constant(u(0.75), days), &p, days).unwrap();
    let i: Vec<f64> = tr.component(Compartment::I).collect();
    assert!(i.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn infections_turn_where_s_crosses_the_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = random_params(&mut rng, 0.05);
        let days = 300;
        let tr = simulate(
            &x0(),
            &ControlSchedule::constant(ControlInput::NONE, days),
            &p,
            days,
        )
        .unwrap();
        let threshold = r0_inverse(&p, ControlInput::NONE);
        let i_dot: Vec<f64> = tr
            .states
            .iter()
            .map(|x| sidthe_rhs(x, ControlInput::NONE, &p)[1])
            .collect();
        let turn = i_dot.iter().position(|&v| v < 0.0).expect("epidemic turns");
        let cross = tr
            .states
            .iter()
            .position(|x| x.s() < threshold)
            .expect("S crosses");
        assert!(
            turn.abs_diff(cross) <= 1,
            "İ turns on day {turn}, S crosses on day {cross}"
        );
        assert!(i_dot[..turn].iter().all(|&v| v > 0.0));
    }
}

fn linear_reference(f: &Matrix3, y0: [f64; 3], t: f64, steps: usize) -> [f64; 3] {
    let h = t / steps as f64;
    let mv = |y: &[f64; 3]| -> [f64; 3] {
        std::array::from_fn(|r| (0..3).map(|c| f[r][c] * y[c]).sum())
    };
    let mut y = y0;
    for _ in 0..steps {
        let k1 = mv(&y);
        let k2 = mv(&std::array::from_fn(|k| y[k] + h / 2.0 * k1[k]));
        let k3 = mv(&std::array::from_fn(|k| y[k] + h / 2.0 * k2[k]));
        let k4 = mv(&std::array::from_fn(|k| y[k] + h * k3[k]));
        y = std::array::from_fn(|k| y[k] + h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]));
    }
    y
}

#[test]
fn matrix_exponential_matches_linear_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let p = random_params(&mut rng, 0.5);
        let s0 = rng.random_range(0.0..1.0);
        let f = overapprox_matrix(s0, &p, u(rng.random_range(0.0..0.75)));
        let y0 = [
            rng.random_range(0.0..0.01),
            rng.random_range(0.0..0.01),
            rng.random_range(0.0..0.01),
        ];
        let t = rng.random_range(1.0..60.0);
        let a = overapprox_solution(&f, t, y0);
        let b = linear_reference(&f, y0, t, 20_000);
        for k in 0..3 {
            assert!(
                (a[k] - b[k]).abs() <= 1e-10 * (1.0 + b[k].abs()),
                "{a:?} vs {b:?}"
            );
        }
    }
    let e = expm3(&[[0.0; 3]; 3]);
    assert_eq!(e, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
}

#[test]
fn first_diagonal_entry_is_negative_exactly_below_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let p = random_params(&mut rng, 0.5);
        let uc = u(rng.random_range(0.0..0.75));
        let s0 = rng.random_range(0.0..1.0);
        let f = overapprox_matrix(s0, &p, uc);
        assert_eq!(f[0][0] < 0.0, s0 < r0_inverse(&p, uc));
        assert!(f[1][1] < 0.0 && f[2][2] < 0.0);
        assert_eq!((f[0][1], f[0][2], f[1][2]), (0.0, 0.0, 0.0));
    }
}

/// Frozen-S linear solution dominates the nonlinear (I, D, T) on 100 random
/// draws. The nonlinear side uses a fine step so integrator error does not
/// blur the comparison.
#[test]
fn frozen_s_solution_dominates_nonlinear_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for draw in 0..100 {
        let p = random_params(&mut rng, 0.05);
        let uv = rng.random_range(0.0..0.75);
        let x = random_simplex(&mut rng, 0.5);
        let f = overapprox_matrix(x.s(), &p, u(uv));
        let y0 = [x.i(), x.d(), x.t()];
        let mut state = *x.as_array();
        for day in 1..=100 {
            state = reference_integrate(state, uv, &p, 1.0, 50);
            let lin = overapprox_solution(&f, day as f64, y0);
            for k in 0..3 {
                let slack = 1e-10 * (1.0 + lin[k].abs());
                assert!(
                    state[k + 1] <= lin[k] + slack,
                    "draw {draw} day {day} component {k}: {} > {}",
                    state[k + 1],
                    lin[k]
                );
            }
        }
    }
}

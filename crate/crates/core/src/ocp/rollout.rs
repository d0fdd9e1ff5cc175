//! Per-scenario forward rollout and discrete adjoint of the RK4 recursion.
//!
//! Only `(S, I, D, T)` are propagated: H and E never feed back into the
//! other compartments, and the stage arithmetic for the first four
//! components is the same as in the full 6-state integrator.

use crate::model::{clamp_noise, rk4_array, Rates};

pub(crate) type Active = [f64; 4];

/// Vector-Jacobian product of the active right-hand side at `x` with
/// cotangent `v`. Returns the state cotangent and the control cotangent.
#[inline(always)]
fn rhs_vjp(r: &Rates, u: f64, x: &Active, v: &Active) -> (Active, f64) {
    let a = r.alpha * (1.0 - u);
    let dv = v[1] - v[0];
    (
        [
            a * x[1] * dv,
            a * x[0] * dv - r.i_out * v[1] + r.gamma * v[2],
            -r.d_out * v[2] + r.delta * v[3],
            -r.t_out * v[3],
        ],
        -r.alpha * x[0] * x[1] * dv,
    )
}

/// Jacobian-vector product of the active right-hand side with state tangent
/// `dx` and control tangent `du`.
#[inline(always)]
fn rhs_jvp(r: &Rates, u: f64, x: &Active, dx: &Active, du: f64) -> Active {
    let a = r.alpha * (1.0 - u);
    let dinf = a * (dx[0] * x[1] + x[0] * dx[1]) - r.alpha * x[0] * x[1] * du;
    [
        -dinf,
        dinf - r.i_out * dx[1],
        r.gamma * dx[1] - r.d_out * dx[2],
        r.delta * dx[2] - r.t_out * dx[3],
    ]
}

#[inline(always)]
pub(crate) fn step(r: &Rates, u: f64, h: f64, x: &Active) -> Active {
    let mut next = rk4_array(x, h, |y| r.active(u, y));
    // Anything below the clamp band is left in place; the full integrator
    // reports it when predictions are materialised.
    let _ = clamp_noise(&mut next);
    next
}

/// Pulls the output cotangent `w` of one RK4 step back to its input.
/// Returns the input cotangent and the contribution to `∂/∂u`.
#[inline(always)]
pub(crate) fn step_vjp(r: &Rates, u: f64, h: f64, x: &Active, w: &Active) -> (Active, f64) {
    let half = 0.5 * h;
    let sixth = h / 6.0;
    let k1 = r.active(u, x);
    let x2: Active = std::array::from_fn(|j| x[j] + half * k1[j]);
    let k2 = r.active(u, &x2);
    let x3: Active = std::array::from_fn(|j| x[j] + half * k2[j]);
    let k3 = r.active(u, &x3);
    let x4: Active = std::array::from_fn(|j| x[j] + h * k3[j]);

    let mut xb = *w;
    let kb4: Active = std::array::from_fn(|j| sixth * w[j]);
    let (z4, u4) = rhs_vjp(r, u, &x4, &kb4);
    let kb3: Active = std::array::from_fn(|j| 2.0 * sixth * w[j] + h * z4[j]);
    let (z3, u3) = rhs_vjp(r, u, &x3, &kb3);
    let kb2: Active = std::array::from_fn(|j| 2.0 * sixth * w[j] + half * z3[j]);
    let (z2, u2) = rhs_vjp(r, u, &x2, &kb2);
    let kb1: Active = std::array::from_fn(|j| sixth * w[j] + half * z2[j]);
    let (z1, u1) = rhs_vjp(r, u, x, &kb1);
    for j in 0..4 {
        xb[j] += z4[j] + z3[j] + z2[j] + z1[j];
    }
    (xb, u1 + u2 + u3 + u4)
}

/// Pushes the tangents `dx[k]` through one RK4 step. Tangent `driven`
/// additionally carries a unit control perturbation.
#[inline(always)]
pub(crate) fn step_tangents(
    r: &Rates,
    u: f64,
    h: f64,
    x: &Active,
    dx: &mut [Active],
    driven: usize,
) {
    let half = 0.5 * h;
    let sixth = h / 6.0;
    let k1 = r.active(u, x);
    let x2: Active = std::array::from_fn(|j| x[j] + half * k1[j]);
    let k2 = r.active(u, &x2);
    let x3: Active = std::array::from_fn(|j| x[j] + half * k2[j]);
    let k3 = r.active(u, &x3);
    let x4: Active = std::array::from_fn(|j| x[j] + h * k3[j]);
    for (k, t) in dx.iter_mut().enumerate() {
        let du = if k == driven { 1.0 } else { 0.0 };
        let d1 = rhs_jvp(r, u, x, t, du);
        let t2: Active = std::array::from_fn(|j| t[j] + half * d1[j]);
        let d2 = rhs_jvp(r, u, &x2, &t2, du);
        let t3: Active = std::array::from_fn(|j| t[j] + half * d2[j]);
        let d3 = rhs_jvp(r, u, &x3, &t3, du);
        let t4: Active = std::array::from_fn(|j| t[j] + h * d3[j]);
        let d4 = rhs_jvp(r, u, &x4, &t4, du);
        for j in 0..4 {
            t[j] += sixth * (d1[j] + 2.0 * d2[j] + 2.0 * d3[j] + d4[j]);
        }
    }
}

/// Time discretisation of one scenario's horizon.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Grid {
    pub steps_per_day: usize,
    pub block_days: usize,
    pub blocks: usize,
}

impl Grid {
    pub fn h(&self) -> f64 {
        1.0 / self.steps_per_day as f64
    }
    pub fn days(&self) -> usize {
        self.block_days * self.blocks
    }
    pub fn steps(&self) -> usize {
        self.days() * self.steps_per_day
    }
    pub fn block_of_step(&self, n: usize) -> usize {
        n / (self.block_days * self.steps_per_day)
    }
}

/// Fills `states` with the rollout (length `grid.steps() + 1`).
pub(crate) fn forward(
    r: &Rates,
    grid: &Grid,
    x0: &Active,
    controls: &[f64],
    states: &mut Vec<Active>,
) {
    states.clear();
    states.push(*x0);
    let h = grid.h();
    let mut x = *x0;
    for n in 0..grid.steps() {
        x = step(r, controls[grid.block_of_step(n)], h, &x);
        states.push(x);
    }
}

/// Reverse sweep. `seed(day, state)` returns the cotangent injected at the
/// end of `day` (1-based); block gradients are accumulated into `ugrad`.
pub(crate) fn backward(
    r: &Rates,
    grid: &Grid,
    controls: &[f64],
    states: &[Active],
    mut seed: impl FnMut(usize, &Active) -> Active,
    ugrad: &mut [f64],
) {
    let h = grid.h();
    let spd = grid.steps_per_day;
    let mut lam = [0.0; 4];
    for n in (0..grid.steps()).rev() {
        let m = n + 1;
        if m % spd == 0 {
            let s = seed(m / spd, &states[m]);
            for j in 0..4 {
                lam[j] += s[j];
            }
        }
        let b = grid.block_of_step(n);
        let (xb, ub) = step_vjp(r, controls[b], h, &states[n], &lam);
        lam = xb;
        ugrad[b] += ub;
    }
}

/// Forward sensitivities of the daily states to the block controls:
/// `out[(day - 1) * blocks + k] = ∂x(day) / ∂u_k`.
pub(crate) fn sensitivities(
    r: &Rates,
    grid: &Grid,
    controls: &[f64],
    states: &[Active],
    out: &mut Vec<Active>,
) {
    let h = grid.h();
    let spd = grid.steps_per_day;
    let nb = grid.blocks;
    out.clear();
    out.resize(grid.days() * nb, [0.0; 4]);
    let mut tangents = vec![[0.0; 4]; nb];
    for n in 0..grid.steps() {
        let b = grid.block_of_step(n);
        // Blocks after `b` have not acted yet.
        step_tangents(r, controls[b], h, &states[n], &mut tangents[..=b], b);
        let m = n + 1;
        if m % spd == 0 {
            let day = m / spd;
            out[(day - 1) * nb..day * nb].copy_from_slice(&tangents);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;

    #[test]
    fn step_vjp_matches_finite_differences() {
        let r = Rates::from(&Params::nominal());
        let x: Active = [0.8, 0.05, 0.02, 0.003];
        let w: Active = [0.3, -1.2, 0.7, 2.0];
        let u = 0.4;
        let h = 1.0;
        let (xb, ub) = step_vjp(&r, u, h, &x, &w);
        let phi = |x: &Active, u: f64| -> f64 {
            let y = rk4_array(x, h, |z| r.active(u, z));
            (0..4).map(|j| w[j] * y[j]).sum()
        };
        let eps = 1e-6;
        for j in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += eps;
            xm[j] -= eps;
            let fd = (phi(&xp, u) - phi(&xm, u)) / (2.0 * eps);
            assert!(
                (fd - xb[j]).abs() < 1e-8 * (1.0 + fd.abs()),
                "{j}: {fd} vs {}",
                xb[j]
            );
        }
        let fd = (phi(&x, u + eps) - phi(&x, u - eps)) / (2.0 * eps);
        assert!((fd - ub).abs() < 1e-8 * (1.0 + fd.abs()));
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let r = Rates::from(&Params::nominal());
        let grid = Grid {
            steps_per_day: 2,
            block_days: 5,
            blocks: 3,
        };
        let x0: Active = [0.99, 0.008, 1.9e-4, 1e-4];
        let u = [0.2, 0.5, 0.1];
        let mut states = Vec::new();
        forward(&r, &grid, &x0, &u, &mut states);
        let mut sens = Vec::new();
        sensitivities(&r, &grid, &u, &states, &mut sens);
        let eps = 1e-6;
        for k in 0..3 {
            let (mut up, mut um) = (u, u);
            up[k] += eps;
            um[k] -= eps;
            let (mut sp, mut sm) = (Vec::new(), Vec::new());
            forward(&r, &grid, &x0, &up, &mut sp);
            forward(&r, &grid, &x0, &um, &mut sm);
            for day in 1..=grid.days() {
                let n = day * grid.steps_per_day;
                for j in 0..4 {
                    let fd = (sp[n][j] - sm[n][j]) / (2.0 * eps);
                    let an = sens[(day - 1) * 3 + k][j];
                    assert!(
                        (fd - an).abs() < 1e-7 * (1e-3 + fd.abs()),
                        "day {day} block {k} comp {j}: {fd} vs {an}"
                    );
                }
            }
        }
    }
}

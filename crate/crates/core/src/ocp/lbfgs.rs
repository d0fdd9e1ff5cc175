//! Projected L-BFGS for bound-constrained minimisation with uniform scalar
//! bounds `lo <= x_j <= hi`.
//!
//! Directions come from the two-loop recursion restricted to the free
//! variables (those not pinned at a bound by the gradient); steps follow the
//! projection arc with Armijo backtracking. The initial inverse Hessian of
//! the recursion is either the usual scaled identity or a caller-supplied
//! operator.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InnerStatus {
    Converged,
    MaxIter,
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerOutcome {
    pub status: InnerStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub projected_gradient: f64,
    pub last_step: f64,
}

/// A positive definite model Hessian `B` that seeds the recursion.
pub(crate) trait CurvatureModel {
    /// Replaces `d` by `B⁻¹ d` on the free variables; fixed entries become 0.
    fn apply_inverse(&self, free: &[bool], d: &mut [f64]);
    /// Identifies the smooth piece of the objective the model was built on.
    /// Curvature pairs from other pieces are discarded.
    fn piece(&self) -> u64;
}

pub(crate) struct BoxLbfgs {
    pub lo: f64,
    pub hi: f64,
    pub memory: usize,
    pub tol: f64,
    pub max_iter: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn projected_gradient_norm(x: &[f64], g: &[f64], lo: f64, hi: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xj, &gj)| ((xj - gj).clamp(lo, hi) - xj).abs())
        .fold(0.0, f64::max)
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

impl BoxLbfgs {
    /// Minimises `eval` over the box starting from `x` (projected first).
    /// `eval(x, Some(g))` must fill the gradient; `eval(x, None)` may skip it.
    /// `h0`, when given, is consulted after each gradient evaluation and
    /// must stay positive definite.
    pub fn minimize<F>(
        &self,
        eval: &mut F,
        h0: Option<&dyn CurvatureModel>,
        x: &mut [f64],
    ) -> InnerOutcome
    where
        F: FnMut(&[f64], Option<&mut [f64]>) -> f64,
    {
        let n = x.len();
        let (lo, hi) = (self.lo, self.hi);
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let mut g = vec![0.0; n];
        let mut fx = eval(x, Some(&mut g));
        let mut evaluations = 1;
        let mut hist: VecDeque<Pair> = VecDeque::with_capacity(self.memory);
        let mut d = vec![0.0; n];
        let mut free = vec![false; n];
        let mut xt = vec![0.0; n];
        let mut gt = vec![0.0; n];
        let mut alpha_buf = vec![0.0; self.memory];
        let mut last_step = 0.0;
        let mut piece = h0.map(|model| model.piece());

        for it in 0..self.max_iter {
            let pg = projected_gradient_norm(x, &g, lo, hi);
            if pg <= self.tol {
                return InnerOutcome {
                    status: InnerStatus::Converged,
                    iterations: it,
                    evaluations,
                    projected_gradient: pg,
                    last_step,
                };
            }
            for j in 0..n {
                free[j] = !((x[j] <= lo && g[j] > 0.0) || (x[j] >= hi && g[j] < 0.0));
            }

            // Two-loop recursion on the free subspace.
            for j in 0..n {
                d[j] = if free[j] { -g[j] } else { 0.0 };
            }
            if let Some(newest) = hist.back() {
                for (k, p) in hist.iter().enumerate().rev() {
                    let a = p.rho * masked_dot(&p.s, &d, &free);
                    alpha_buf[k] = a;
                    for j in 0..n {
                        if free[j] {
                            d[j] -= a * p.y[j];
                        }
                    }
                }
                match h0 {
                    Some(model) => model.apply_inverse(&free, &mut d),
                    None => {
                        let scale = dot(&newest.s, &newest.y) / dot(&newest.y, &newest.y);
                        d.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                for (k, p) in hist.iter().enumerate() {
                    let b = p.rho * masked_dot(&p.y, &d, &free);
                    for j in 0..n {
                        if free[j] {
                            d[j] += (alpha_buf[k] - b) * p.s[j];
                        }
                    }
                }
            } else if let Some(model) = h0 {
                model.apply_inverse(&free, &mut d);
            }
            let gd = dot(&g, &d);
            let steepest = !(gd < 0.0 && gd.is_finite());
            if steepest {
                hist.clear();
                for j in 0..n {
                    d[j] = if free[j] { -g[j] } else { 0.0 };
                }
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax == 0.0 {
                break;
            }
            let mut t = if steepest || (hist.is_empty() && h0.is_none()) {
                (0.1 * (hi - lo) / dmax).min(1.0)
            } else {
                1.0
            };

            let mut accepted = None;
            let noise = 1e-12 * fx.abs();
            for bt in 0..MAX_BACKTRACKS {
                for j in 0..n {
                    xt[j] = (x[j] + t * d[j]).clamp(lo, hi);
                }
                let dec: f64 = (0..n).map(|j| g[j] * (xt[j] - x[j])).sum();
                if dec >= 0.0 {
                    t *= 0.5;
                    continue;
                }
                let ft = if bt == 0 {
                    eval(&xt, Some(&mut gt))
                } else {
                    eval(&xt, None)
                };
                evaluations += 1;
                if ft <= fx + ARMIJO * dec {
                    if bt > 0 {
                        eval(&xt, Some(&mut gt));
                        evaluations += 1;
                    }
                    accepted = Some(ft);
                    break;
                }
                // Once the decrease is below the resolution of f, fall back
                // to the slope: accept if it shrank along the step.
                if ft <= fx + noise {
                    if bt > 0 {
                        eval(&xt, Some(&mut gt));
                        evaluations += 1;
                    }
                    let slope: f64 = (0..n).map(|j| gt[j] * (xt[j] - x[j])).sum();
                    if slope.abs() <= 0.9 * dec.abs() {
                        accepted = Some(ft);
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some(ft) = accepted else {
                if hist.is_empty() {
                    return InnerOutcome {
                        status: InnerStatus::LineSearchFailed,
                        iterations: it,
                        evaluations,
                        projected_gradient: pg,
                        last_step,
                    };
                }
                hist.clear();
                continue;
            };

            let s: Vec<f64> = (0..n).map(|j| xt[j] - x[j]).collect();
            let y: Vec<f64> = (0..n).map(|j| gt[j] - g[j]).collect();
            last_step = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let sy = dot(&s, &y);
            // The model was refreshed by the evaluation at `xt`.
            let new_piece = h0.map(|model| model.piece());
            if new_piece != piece {
                hist.clear();
                piece = new_piece;
            } else if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if hist.len() == self.memory {
                    hist.pop_front();
                }
                hist.push_back(Pair {
                    s,
                    y,
                    rho: 1.0 / sy,
                });
            }
            x.copy_from_slice(&xt);
            std::mem::swap(&mut g, &mut gt);
            fx = ft;
        }
        InnerOutcome {
            status: InnerStatus::MaxIter,
            iterations: self.max_iter,
            evaluations,
            projected_gradient: projected_gradient_norm(x, &g, lo, hi),
            last_step,
        }
    }
}

fn masked_dot(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| x * y)
        .sum()
}

//! The positive invariant box for the controlled SIDTHE dynamics.
//!
//! Keeping T below a hospital capacity `t_max` forces bounds on the upstream
//! compartments: D feeds T, I feeds D, and S drives I. The box
//!
//! ```text
//! [0, s_max] × [0, i_max] × [0, d_max] × [0, t_max] × [0, 1]²
//! ```
//!
//! is invariant whenever the feedback applies `u_max` on the `I = i_max`
//! face. With interval-valued parameters a box common to every realisation
//! is obtained by taking lower endpoints wherever a rate appears in a
//! numerator and upper endpoints wherever it appears in a denominator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{sidthe_rhs, Compartment, ControlInput, Params, State};

/// Sign checks on box faces are done with this slack.
pub const FACE_TOLERANCE: f64 = 1e-12;

/// Upper bounds on S, I, D and T. H and E are bounded by 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantBox {
    pub s_max: f64,
    pub i_max: f64,
    pub d_max: f64,
    pub t_max: f64,
}

impl InvariantBox {
    pub fn bound(&self, c: Compartment) -> f64 {
        match c {
            Compartment::S => self.s_max,
            Compartment::I => self.i_max,
            Compartment::D => self.d_max,
            Compartment::T => self.t_max,
            Compartment::H | Compartment::E => 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.s_max, self.i_max, self.d_max, self.t_max]
    }

    /// Componentwise minimum of two boxes.
    pub fn intersect(&self, other: &InvariantBox) -> InvariantBox {
        InvariantBox {
            s_max: self.s_max.min(other.s_max),
            i_max: self.i_max.min(other.i_max),
            d_max: self.d_max.min(other.d_max),
            t_max: self.t_max.min(other.t_max),
        }
    }

    pub fn scaled(&self, c: Compartment, factor: f64) -> InvariantBox {
        let mut b = *self;
        match c {
            Compartment::S => b.s_max *= factor,
            Compartment::I => b.i_max *= factor,
            Compartment::D => b.d_max *= factor,
            Compartment::T => b.t_max *= factor,
            Compartment::H | Compartment::E => {}
        }
        b
    }
}

/// Componentwise parameter interval `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamsInterval {
    lower: Params,
    upper: Params,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("interval lower bound exceeds upper bound for {name}: {lower} > {upper}")]
pub struct IntervalError {
    pub name: &'static str,
    pub lower: f64,
    pub upper: f64,
}

impl ParamsInterval {
    pub fn new(lower: Params, upper: Params) -> Result<Self, IntervalError> {
        let (lo, hi) = (lower.to_array(), upper.to_array());
        for k in 0..6 {
            if lo[k] > hi[k] {
                return Err(IntervalError {
                    name: Params::NAMES[k],
                    lower: lo[k],
                    upper: hi[k],
                });
            }
        }
        Ok(ParamsInterval { lower, upper })
    }

    pub fn degenerate(theta: Params) -> Self {
        ParamsInterval {
            lower: theta,
            upper: theta,
        }
    }

    pub fn lower(&self) -> &Params {
        &self.lower
    }

    pub fn upper(&self) -> &Params {
        &self.upper
    }

    pub fn contains(&self, theta: &Params) -> bool {
        let (lo, hi, v) = (
            self.lower.to_array(),
            self.upper.to_array(),
            theta.to_array(),
        );
        (0..6).all(|k| lo[k] <= v[k] && v[k] <= hi[k])
    }

    /// All 64 corner parameter vectors, lower endpoints first.
    pub fn corners(&self) -> Vec<Params> {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        (0..64u32)
            .map(|mask| {
                let v = std::array::from_fn(|k| {
                    if mask >> (5 - k) & 1 == 1 {
                        hi[k]
                    } else {
                        lo[k]
                    }
                });
                Params::from_array(v).expect("corners of a positive interval are positive")
            })
            .collect()
    }
}

fn s_bound(
    gamma: f64,
    lambda_num: f64,
    lambda_den: f64,
    gamma_den: f64,
    alpha: f64,
    u_max: f64,
) -> f64 {
    (gamma * (1.0 + lambda_num / (lambda_den + gamma_den)) / (alpha * (1.0 - u_max))).min(1.0)
}

/// Invariant box for a single parameter vector.
///
/// `u_max` must lie in `[0, 1)` and `t_max` in `(0, 1]`.
pub fn invariant_box(theta: &Params, u_max: f64, t_max: f64) -> InvariantBox {
    let p = theta;
    InvariantBox {
        s_max: s_bound(p.gamma, p.lambda, p.lambda, p.gamma, p.alpha, u_max),
        i_max: ((p.delta + p.lambda) * (p.sigma + p.tau) / (p.gamma * p.delta) * t_max).min(1.0),
        d_max: ((p.sigma + p.tau) / p.delta * t_max).min(1.0),
        t_max: t_max.min(1.0),
    }
}

/// Box valid for every parameter vector in `interval`.
pub fn robust_invariant_box(interval: &ParamsInterval, u_max: f64, t_max: f64) -> InvariantBox {
    let (lo, hi) = (interval.lower(), interval.upper());
    InvariantBox {
        s_max: s_bound(lo.gamma, lo.lambda, hi.lambda, hi.gamma, hi.alpha, u_max),
        i_max: ((lo.delta + lo.lambda) * (lo.sigma + lo.tau) / (hi.gamma * hi.delta) * t_max)
            .min(1.0),
        d_max: ((lo.sigma + lo.tau) / hi.delta * t_max).min(1.0),
        t_max: t_max.min(1.0),
    }
}

pub fn contains(b: &InvariantBox, x: &State) -> bool {
    x.s() <= b.s_max && x.i() <= b.i_max && x.d() <= b.d_max && x.t() <= b.t_max
}

/// One face of the box: a compartment pinned either at 0 or at its upper
/// bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Face {
    pub compartment: Compartment,
    pub upper: bool,
}

impl std::fmt::Display for Face {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let side = if self.upper { "max" } else { "0" };
        write!(f, "{}={}", self.compartment, side)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    pub face: Face,
    pub samples: usize,
    /// Largest outward derivative seen (positive means outward).
    pub worst_outward_rate: f64,
    pub worst_state: State,
    pub worst_control: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NagumoReport {
    pub faces: Vec<FaceReport>,
}

impl NagumoReport {
    pub fn passed(&self) -> bool {
        self.faces.iter().all(|f| f.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &FaceReport> {
        self.faces.iter().filter(|f| !f.passed)
    }

    pub fn face(&self, compartment: Compartment, upper: bool) -> Option<&FaceReport> {
        self.faces
            .iter()
            .find(|f| f.face.compartment == compartment && f.face.upper == upper)
    }
}

/// Draws a state on `face` with the remaining S, I, D, T inside the box and
/// the whole vector on the simplex.
fn sample_on_face<R: Rng>(b: &InvariantBox, face: Face, rng: &mut R) -> State {
    let c = face.compartment;
    if face.upper && matches!(c, Compartment::H | Compartment::E) {
        let mut v = [0.0; 6];
        v[c.index()] = 1.0;
        return State::new(v).expect("vertex of the simplex");
    }
    let bounds = b.as_array();
    let mut v = [0.0f64; 6];
    // I, D, T first (their boxes are small), then S from the remaining mass.
    for k in 1..4 {
        v[k] = if k == c.index() {
            if face.upper {
                bounds[k]
            } else {
                0.0
            }
        } else {
            rng.random_range(0.0..=bounds[k])
        };
    }
    if c == Compartment::S {
        let s = if face.upper { b.s_max.min(1.0) } else { 0.0 };
        let avail = 1.0 - s;
        let idt: f64 = v[1..4].iter().sum();
        if idt > avail {
            let scale = avail / idt;
            v[1..4].iter_mut().for_each(|x| *x *= scale);
        }
        v[0] = s;
    } else {
        let idt: f64 = v[1..4].iter().sum();
        let avail = (1.0 - idt).max(0.0);
        v[0] = rng.random_range(0.0..=b.s_max.min(avail));
    }
    let rest = (1.0 - v[..4].iter().sum::<f64>()).max(0.0);
    match (c, face.upper) {
        (Compartment::H, false) => v[5] = rest,
        (Compartment::E, false) => v[4] = rest,
        _ => {
            let share: f64 = rng.random_range(0.0..=1.0);
            v[4] = rest * share;
            v[5] = rest - v[4];
        }
    }
    State::with_tolerance(v, 1e-12).expect("face sample lies on the simplex")
}

/// Samples every face of `b` and checks that the vector field points into
/// the box. The I-upper face is evaluated at `u = u_max`, every other face
/// at a random admissible control.
pub fn nagumo_boundary_check(
    b: &InvariantBox,
    theta: &Params,
    u_max: f64,
    samples: usize,
    seed: u64,
) -> NagumoReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut faces = Vec::with_capacity(12);
    for c in Compartment::ALL {
        for upper in [false, true] {
            let face = Face {
                compartment: c,
                upper,
            };
            let mut worst = f64::NEG_INFINITY;
            let mut worst_state = State::susceptible_only();
            let mut worst_control = 0.0;
            for _ in 0..samples {
                let x = sample_on_face(b, face, &mut rng);
                let u = if c == Compartment::I && upper {
                    u_max
                } else {
                    rng.random_range(0.0..=u_max)
                };
                let f = sidthe_rhs(&x, ControlInput::new(u).expect("u_max < 1"), theta);
                let outward = if upper { f[c.index()] } else { -f[c.index()] };
                if outward > worst {
                    worst = outward;
                    worst_state = x;
                    worst_control = u;
                }
            }
            faces.push(FaceReport {
                face,
                samples,
                worst_outward_rate: worst,
                worst_state,
                worst_control,
                passed: samples == 0 || worst <= FACE_TOLERANCE,
            });
        }
    }
    NagumoReport { faces }
}

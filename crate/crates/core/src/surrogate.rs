//! Second-order surrogate state space and its integrator.
//!
//! The model class is
//!
//! ```text
//!     dy/dt = v
//!     dv/dt = -k(x)·y - d(x)·v + g(x)·u,      x = (y, v)
//! ```
//!
//! with state-dependent stiffness `k`, damping `d`, and input gain `g`. When
//! the local stiffness is positive the triple maps to textbook second-order
//! descriptors: natural frequency `sqrt(k)`, damping ratio `d / (2 sqrt(k))`,
//! and static gain `g / k`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Phase-plane state (output and its rate).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub y: f64,
    pub v: f64,
}

impl State {
    pub fn new(y: f64, v: f64) -> Self {
        State { y, v }
    }

    pub fn add_scaled(self, other: State, s: f64) -> State {
        State {
            y: self.y + s * other.y,
            v: self.v + s * other.v,
        }
    }

    pub fn is_finite(self) -> bool {
        self.y.is_finite() && self.v.is_finite()
    }
}

/// Local stiffness / damping / input-gain triple. No sign constraint: the
/// training objective, not the type, keeps stiffness in a sensible range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub k: f64,
    pub d: f64,
    pub g: f64,
}

impl Coefficients {
    pub fn new(k: f64, d: f64, g: f64) -> Self {
        Coefficients { k, d, g }
    }
}

/// Second-order descriptors derived from a coefficient triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalParams {
    pub omega_n: f64,
    pub zeta: f64,
    pub gain: f64,
}

/// Affine channel map; `normalized = (raw - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub offset: f64,
    pub scale: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn denormalize(&self, n: f64) -> f64 {
        self.offset + self.scale * n
    }
}

/// Per-dataset normalization for time, both state channels, and the input.
/// Computed on the training split and reused verbatim elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub t: Affine,
    pub y: Affine,
    pub v: Affine,
    pub u: Affine,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            t: Affine::identity(),
            y: Affine::identity(),
            v: Affine::identity(),
            u: Affine::identity(),
        }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        for (name, a) in [("t", self.t), ("y", self.y), ("v", self.v), ("u", self.u)] {
            if !a.offset.is_finite() || !a.scale.is_finite() || a.scale <= 0.0 {
                return Err(SurrogateError::BadNormalization {
                    channel: name,
                    offset: a.offset,
                    scale: a.scale,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateError {
    /// Canonical descriptors are undefined for non-positive stiffness.
    NonPositiveStiffness { k: f64, d: f64, g: f64 },
    /// A rollout left the configured state bound.
    BlowUp { t: f64, y: f64, v: f64 },
    /// Channel normalization with a non-finite or non-positive scale.
    BadNormalization {
        channel: &'static str,
        offset: f64,
        scale: f64,
    },
    /// A sampled signal needs at least one sample.
    EmptySignal,
}

impl fmt::Display for SurrogateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurrogateError::NonPositiveStiffness { k, d, g } => write!(
                f,
                "canonical parameters undefined for k = {k} (d = {d}, g = {g}): stiffness must be positive"
            ),
            SurrogateError::BlowUp { t, y, v } => {
                write!(f, "rollout blew up at t = {t}: state ({y}, {v})")
            }
            SurrogateError::BadNormalization {
                channel,
                offset,
                scale,
            } => write!(
                f,
                "invalid normalization for channel '{channel}': offset {offset}, scale {scale}"
            ),
            SurrogateError::EmptySignal => write!(f, "sampled signal has no samples"),
        }
    }
}

impl std::error::Error for SurrogateError {}

/// Surrogate vector field at one state under coefficients `th`.
pub fn surrogate_rhs(x: State, u: f64, th: Coefficients) -> State {
    State {
        y: x.v,
        v: -th.k * x.y - th.d * x.v + th.g * u,
    }
}

/// Natural frequency, damping ratio, and static gain for a coefficient
/// triple; requires positive stiffness.
pub fn canonical_params(th: Coefficients) -> Result<CanonicalParams, SurrogateError> {
    if !(th.k > 0.0) {
        return Err(SurrogateError::NonPositiveStiffness {
            k: th.k,
            d: th.d,
            g: th.g,
        });
    }
    let w = th.k.sqrt();
    Ok(CanonicalParams {
        omega_n: w,
        zeta: th.d / (2.0 * w),
        gain: th.g / th.k,
    })
}

/// One classical Runge-Kutta step of `rhs` from `x` at time `t` with step
/// `h`; the input signal is sampled at `t`, `t + h/2`, and `t + h`.
pub fn rk4_step<F, U>(rhs: F, x: State, t: f64, h: f64, u: U) -> State
where
    F: Fn(State, f64) -> State,
    U: Fn(f64) -> f64,
{
    let u0 = u(t);
    let um = u(t + 0.5 * h);
    let u1 = u(t + h);
    let k1 = rhs(x, u0);
    let k2 = rhs(x.add_scaled(k1, 0.5 * h), um);
    let k3 = rhs(x.add_scaled(k2, 0.5 * h), um);
    let k4 = rhs(x.add_scaled(k3, h), u1);
    State {
        y: x.y + h / 6.0 * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
        v: x.v + h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
    }
}

/// Integrates the surrogate field for `n` steps of size `h` from `x0`,
/// re-evaluating the coefficient map at every stage state. Returns the `n+1`
/// states including `x0`, or a blow-up error the moment the state leaves
/// `[-bound, bound]` on either channel (or stops being finite).
pub fn rollout<C, U>(
    x0: State,
    t0: f64,
    h: f64,
    n: usize,
    u: U,
    coeff: C,
    bound: f64,
) -> Result<Vec<State>, SurrogateError>
where
    C: Fn(State, f64) -> Coefficients,
    U: Fn(f64) -> f64,
{
    let rhs = |x: State, uu: f64| surrogate_rhs(x, uu, coeff(x, uu));
    let mut out = Vec::with_capacity(n + 1);
    let mut x = x0;
    out.push(x);
    for i in 0..n {
        let t = t0 + i as f64 * h;
        x = rk4_step(&rhs, x, t, h, &u);
        if !x.is_finite() || x.y.abs() > bound || x.v.abs() > bound {
            return Err(SurrogateError::BlowUp {
                t: t + h,
                y: x.y,
                v: x.v,
            });
        }
        out.push(x);
    }
    Ok(out)
}

/// Uniform-grid samples with linear interpolation, clamped to the end
/// values outside the grid. This is how stored input samples are turned back
/// into a signal for rollouts.
#[derive(Clone, Debug)]
pub struct SampledSignal {
    t0: f64,
    dt: f64,
    values: Vec<f64>,
}

impl SampledSignal {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self, SurrogateError> {
        if values.is_empty() {
            return Err(SurrogateError::EmptySignal);
        }
        Ok(SampledSignal { t0, dt, values })
    }

    pub fn value(&self, t: f64) -> f64 {
        let n = self.values.len();
        if n == 1 {
            return self.values[0];
        }
        let s = (t - self.t0) / self.dt;
        if s <= 0.0 {
            return self.values[0];
        }
        let last = (n - 1) as f64;
        if s >= last {
            return self.values[n - 1];
        }
        let i = s.floor() as usize;
        let frac = s - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

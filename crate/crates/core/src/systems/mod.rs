//! Benchmark systems, excitation signals, and reference simulation.
//!
//! Three single-input plants drive the test suite: a Duffing oscillator
//! (stiffening spring), a Van der Pol oscillator (state-dependent damping
//! that pumps energy near the origin), and a gravity-drained two-tank
//! cascade. The first two live natively in the (y, v) plane; the tank pair
//! is simulated in level coordinates and observed through the level of the
//! second tank and its rate.
//!
//! Reference trajectories come from fixed-step RK4 on the true dynamics with
//! a step far below anything the learned models integrate with, stepping
//! exactly onto every requested output time.

mod dataset;

pub(crate) use dataset::hex;
pub use dataset::{
    dataset_hash, fit_normalization, generate_dataset, lerp_series, subsample_even, Dataset,
    DatasetError, GenerateConfig, Trajectory,
};

use crate::surrogate::{rk4_step, State};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The true plant behind a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SystemSpec {
    /// `y'' = -alpha y - beta y^3 - delta y' + gain u`
    Duffing {
        alpha: f64,
        beta: f64,
        delta: f64,
        gain: f64,
    },
    /// `y'' = mu (1 - y^2) y' - y + u`
    VanDerPol { mu: f64 },
    /// Pump feeds tank 1, tank 1 drains into tank 2, tank 2 drains out:
    /// `A1 h1' = pump u - c1 sqrt(h1)`, `A2 h2' = c1 sqrt(h1) - c2 sqrt(h2)`,
    /// levels clamped at zero. Observed as y = h2, v = h2'.
    TwoTank {
        area1: f64,
        area2: f64,
        c1: f64,
        c2: f64,
        pump: f64,
    },
}

impl SystemSpec {
    pub fn duffing() -> Self {
        SystemSpec::Duffing {
            alpha: 1.0,
            beta: 1.0,
            delta: 0.3,
            gain: 1.0,
        }
    }

    pub fn van_der_pol() -> Self {
        SystemSpec::VanDerPol { mu: 1.0 }
    }

    pub fn two_tank() -> Self {
        SystemSpec::TwoTank {
            area1: 1.0,
            area2: 1.0,
            c1: 0.5,
            c2: 0.5,
            pump: 1.0,
        }
    }

    /// A linear plant expressed as a Duffing system with no cubic term:
    /// constant coefficients (k, d, g).
    pub fn linear(k: f64, d: f64, g: f64) -> Self {
        SystemSpec::Duffing {
            alpha: k,
            beta: 0.0,
            delta: d,
            gain: g,
        }
    }

    /// Dynamics in simulation coordinates. For the oscillators that is the
    /// (y, v) plane itself; for the tanks, `State { y: h1, v: h2 }`.
    pub fn sim_rhs(&self, s: State, u: f64) -> State {
        match *self {
            SystemSpec::Duffing {
                alpha,
                beta,
                delta,
                gain,
            } => State {
                y: s.v,
                v: -alpha * s.y - beta * s.y * s.y * s.y - delta * s.v + gain * u,
            },
            SystemSpec::VanDerPol { mu } => State {
                y: s.v,
                v: mu * (1.0 - s.y * s.y) * s.v - s.y + u,
            },
            SystemSpec::TwoTank {
                area1,
                area2,
                c1,
                c2,
                pump,
            } => {
                let h1 = s.y.max(0.0);
                let h2 = s.v.max(0.0);
                State {
                    y: (pump * u - c1 * h1.sqrt()) / area1,
                    v: (c1 * h1.sqrt() - c2 * h2.sqrt()) / area2,
                }
            }
        }
    }

    /// Post-step projection onto the physically valid region of the
    /// simulation coordinates.
    pub fn clamp_sim(&self, s: State) -> State {
        match self {
            SystemSpec::TwoTank { .. } => State {
                y: s.y.max(0.0),
                v: s.v.max(0.0),
            },
            _ => s,
        }
    }

    /// Maps simulation coordinates to the observed (y, v) plane.
    pub fn observe(&self, s: State, u: f64) -> State {
        match *self {
            SystemSpec::TwoTank {
                area2, c1, c2, ..
            } => {
                let h1 = s.y.max(0.0);
                let h2 = s.v.max(0.0);
                State {
                    y: h2,
                    v: (c1 * h1.sqrt() - c2 * h2.sqrt()) / area2,
                }
            }
            _ => {
                let _ = u;
                s
            }
        }
    }

    /// The true vector field `d/dt (y, v)` at a point of the observed plane,
    /// or `None` where the point is outside the system's reachable set (the
    /// tank cascade cannot realize every (level, rate) pair).
    pub fn plane_field(&self, x: State, u: f64) -> Option<State> {
        match *self {
            SystemSpec::TwoTank {
                area1,
                area2,
                c1,
                c2,
                pump,
            } => {
                if x.y < 0.0 {
                    return None;
                }
                let h2 = x.y;
                // Invert v = (c1 sqrt(h1) - c2 sqrt(h2)) / area2 for h1.
                let flow_in = area2 * x.v + c2 * h2.sqrt();
                if flow_in < 0.0 {
                    return None;
                }
                let h1 = (flow_in / c1) * (flow_in / c1);
                // Rates of both levels, then the chain rule for v'.
                let h1dot = (pump * u - c1 * h1.sqrt()) / area1;
                let h2dot = (c1 * h1.sqrt() - c2 * h2.sqrt()) / area2;
                // d/dt sqrt(h) = hdot / (2 sqrt(h)); singular at empty tanks.
                if h1 <= 1e-12 || h2 <= 1e-12 {
                    return None;
                }
                let vdot =
                    (c1 * h1dot / (2.0 * h1.sqrt()) - c2 * h2dot / (2.0 * h2.sqrt())) / area2;
                Some(State { y: h2dot, v: vdot })
            }
            _ => Some(self.sim_rhs(x, u)),
        }
    }

    /// Default initial-condition box in simulation coordinates.
    pub fn default_ic_box(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            SystemSpec::TwoTank { .. } => ([0.5, 0.5], [2.0, 2.0]),
            _ => ([-1.0, -1.0], [1.0, 1.0]),
        }
    }
}

/// Excitation recipe; each trajectory draws its own realization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    Zero,
    /// Sum of `components` sines with frequencies drawn uniformly from
    /// [f_lo, f_hi] Hz, random phases, equal amplitudes summing to
    /// `amplitude`.
    Multisine {
        components: usize,
        f_lo: f64,
        f_hi: f64,
        amplitude: f64,
    },
    /// Piecewise-constant levels drawn uniformly from [lo, hi], switching
    /// every `period` seconds.
    Steps { period: f64, lo: f64, hi: f64 },
    /// Linear sweep from f0 to f1 Hz over the trajectory.
    Chirp { f0: f64, f1: f64, amplitude: f64 },
}

impl InputSpec {
    /// The default excitation: five sines spread over [0.1, 2] Hz.
    pub fn default_multisine() -> Self {
        InputSpec::Multisine {
            components: 5,
            f_lo: 0.1,
            f_hi: 2.0,
            amplitude: 1.0,
        }
    }

    /// Draws one concrete input signal for a trajectory of length `t_end`.
    pub fn realize(&self, rng: &mut ChaCha8Rng, t_end: f64) -> InputRealization {
        match *self {
            InputSpec::Zero => InputRealization::Zero,
            InputSpec::Multisine {
                components,
                f_lo,
                f_hi,
                amplitude,
            } => {
                let amp = amplitude / components.max(1) as f64;
                let terms = (0..components)
                    .map(|_| {
                        let f = rng.gen_range(f_lo..=f_hi);
                        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                        (std::f64::consts::TAU * f, amp, phase)
                    })
                    .collect();
                InputRealization::Multisine { terms }
            }
            InputSpec::Steps { period, lo, hi } => {
                let n = (t_end / period).ceil() as usize + 1;
                let levels = (0..n.max(1)).map(|_| rng.gen_range(lo..=hi)).collect();
                InputRealization::Steps { period, levels }
            }
            InputSpec::Chirp { f0, f1, amplitude } => InputRealization::Chirp {
                w0: std::f64::consts::TAU * f0,
                // Sweep rate so the instantaneous frequency reaches f1 at t_end.
                rate: std::f64::consts::TAU * (f1 - f0) / t_end.max(1e-12),
                amplitude,
            },
        }
    }
}

/// A concrete input signal, evaluable at any time.
#[derive(Clone, Debug, PartialEq)]
pub enum InputRealization {
    Zero,
    /// (angular frequency, amplitude, phase) per term.
    Multisine { terms: Vec<(f64, f64, f64)> },
    Steps { period: f64, levels: Vec<f64> },
    Chirp { w0: f64, rate: f64, amplitude: f64 },
}

impl InputRealization {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            InputRealization::Zero => 0.0,
            InputRealization::Multisine { terms } => terms
                .iter()
                .map(|&(w, a, p)| a * (w * t + p).sin())
                .sum(),
            InputRealization::Steps { period, levels } => {
                let idx = ((t / period).floor().max(0.0) as usize).min(levels.len() - 1);
                levels[idx]
            }
            InputRealization::Chirp {
                w0,
                rate,
                amplitude,
            } => amplitude * ((w0 + 0.5 * rate * t) * t).sin(),
        }
    }
}

/// Integrates the true dynamics from `x0` (simulation coordinates), landing
/// exactly on each time in `times` (which must be ascending, starting at
/// `times[0] >= 0`; integration starts at t = 0). Substeps never exceed
/// `dt_max`. Returns the simulation-coordinate state at each requested time.
pub fn simulate_truth(
    spec: &SystemSpec,
    x0: State,
    input: &InputRealization,
    times: &[f64],
    dt_max: f64,
) -> Vec<State> {
    assert!(dt_max > 0.0);
    let mut out = Vec::with_capacity(times.len());
    let mut x = spec.clamp_sim(x0);
    let mut t = 0.0;
    let u = |tt: f64| input.value(tt);
    for &target in times {
        debug_assert!(target >= t - 1e-12, "times must be ascending");
        let span = target - t;
        if span > 1e-15 {
            let n_sub = (span / dt_max).ceil().max(1.0) as usize;
            let h = span / n_sub as f64;
            for i in 0..n_sub {
                let t0 = t + i as f64 * h;
                x = rk4_step(|s, uu| spec.sim_rhs(s, uu), x, t0, h, &u);
                x = spec.clamp_sim(x);
            }
            t = target;
        }
        out.push(x);
    }
    out
}

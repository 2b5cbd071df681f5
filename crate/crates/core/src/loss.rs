//! Training objective terms, defined once at value level.
//!
//! The trainer assembles the same formulas as tape graphs for
//! differentiation; tests hold the two implementations together. All terms
//! are in physical units and averaged so their magnitudes are comparable
//! across batch sizes and grids.

use crate::ridge::Hint;
use crate::surrogate::{Coefficients, State};
use serde::Serialize;

/// Term weights of the composite objective. `hint` is the live (decaying)
/// value, not the initial one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    pub data: f64,
    pub ic: f64,
    pub phys: f64,
    pub hint: f64,
    pub smooth: f64,
    pub roll: f64,
}

/// Mean squared reconstruction error over measurement points, averaged over
/// both state channels.
pub fn data_loss(pred_y: &[f64], pred_v: &[f64], meas_y: &[f64], meas_v: &[f64]) -> f64 {
    let n = meas_y.len();
    debug_assert!(n > 0 && pred_y.len() == n && pred_v.len() == n && meas_v.len() == n);
    let mut acc = 0.0;
    for i in 0..n {
        let dy = pred_y[i] - meas_y[i];
        let dv = pred_v[i] - meas_v[i];
        acc += dy * dy + dv * dv;
    }
    acc / (2.0 * n as f64)
}

/// Squared distance between the reconstruction at the first measurement time
/// and the measured initial state.
pub fn ic_loss(pred0: State, meas0: State) -> f64 {
    let dy = pred0.y - meas0.y;
    let dv = pred0.v - meas0.v;
    dy * dy + dv * dv
}

/// Residual of the governing form at one point:
/// `vdot + k y + d v - g u`.
pub fn dynamics_residual(y: f64, v: f64, vdot: f64, u: f64, theta: Coefficients) -> f64 {
    vdot + theta.k * y + theta.d * v - theta.g * u
}

/// Mean squared dynamics residual over a grid; with `kinematic`, adds the
/// mean squared defect of `ydot = v`.
pub fn physics_loss(
    y: &[f64],
    v: &[f64],
    ydot: &[f64],
    vdot: &[f64],
    u: &[f64],
    theta: &[Coefficients],
    kinematic: bool,
) -> f64 {
    let n = y.len();
    debug_assert!(n > 0);
    debug_assert!(v.len() == n && ydot.len() == n && vdot.len() == n && u.len() == n);
    debug_assert_eq!(theta.len(), n);
    let mut dyn_acc = 0.0;
    let mut kin_acc = 0.0;
    for i in 0..n {
        let r = dynamics_residual(y[i], v[i], vdot[i], u[i], theta[i]);
        dyn_acc += r * r;
        let rk = ydot[i] - v[i];
        kin_acc += rk * rk;
    }
    let mut total = dyn_acc / n as f64;
    if kinematic {
        total += kin_acc / n as f64;
    }
    total
}

/// Trust-weighted mean squared distance between the coefficient map's
/// outputs and the local regression estimates; zero when nothing is trusted.
pub fn hint_loss(theta: &[Coefficients], hints: &[Hint]) -> f64 {
    debug_assert_eq!(theta.len(), hints.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (th, h) in theta.iter().zip(hints) {
        let dk = th.k - h.theta.k;
        let dd = th.d - h.theta.d;
        let dg = th.g - h.theta.g;
        num += h.weight * (dk * dk + dd * dd + dg * dg);
        den += h.weight;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Pooled total-variation penalty over per-trajectory coefficient series:
/// the L1 norm of consecutive differences, averaged over all steps of all
/// series.
pub fn smoothness_loss(series: &[&[Coefficients]]) -> f64 {
    let mut acc = 0.0;
    let mut steps = 0usize;
    for s in series {
        for w in s.windows(2) {
            acc += (w[1].k - w[0].k).abs()
                + (w[1].d - w[0].d).abs()
                + (w[1].g - w[0].g).abs();
            steps += 1;
        }
    }
    if steps > 0 {
        acc / steps as f64
    } else {
        0.0
    }
}

/// Mean squared state error along a short predicted rollout against its
/// reference.
pub fn rollout_loss(pred: &[State], target: &[State]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    debug_assert!(!pred.is_empty());
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let dy = p.y - t.y;
        let dv = p.v - t.v;
        acc += dy * dy + dv * dv;
    }
    acc / pred.len() as f64
}

/// Per-epoch record of every term (unweighted values) plus the weighted
/// total actually optimized in that phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub data: f64,
    pub ic: f64,
    pub phys: f64,
    pub hint: f64,
    pub smooth: f64,
    pub roll: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_loss_hand_example() {
        // Errors: (1, -1) and (0, 2) -> sum of squares 1 + 1 + 0 + 4 = 6;
        // mean over 2 points x 2 channels = 1.5.
        let l = data_loss(&[1.0, 0.0], &[0.0, 3.0], &[0.0, 0.0], &[1.0, 1.0]);
        assert!((l - 1.5).abs() < 1e-15);
    }

    #[test]
    fn ic_loss_hand_example() {
        let l = ic_loss(State { y: 1.0, v: 2.0 }, State { y: 0.0, v: 0.0 });
        assert_eq!(l, 5.0);
    }

    #[test]
    fn physics_loss_vanishes_on_exact_model() {
        // States of y'' = -4y with k=4, d=0, g=1, u=0: y = sin(2t).
        let n = 50;
        let mut y = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut ydot = vec![0.0; n];
        let mut vdot = vec![0.0; n];
        let u = vec![0.0; n];
        let theta = vec![
            Coefficients {
                k: 4.0,
                d: 0.0,
                g: 1.0
            };
            n
        ];
        for i in 0..n {
            let t = i as f64 * 0.07;
            y[i] = (2.0 * t).sin();
            v[i] = 2.0 * (2.0 * t).cos();
            ydot[i] = v[i];
            vdot[i] = -4.0 * (2.0 * t).sin();
        }
        let l = physics_loss(&y, &v, &ydot, &vdot, &u, &theta, true);
        assert!(l < 1e-28, "{l}");
    }

    #[test]
    fn physics_loss_hand_example_with_kinematic_defect() {
        // One point: y=1, v=2, ydot=2.5, vdot=0, u=1, theta=(3, 0.5, 2):
        // dynamics residual = 0 + 3 + 1 - 2 = 2; kinematic = 0.5.
        let theta = [Coefficients {
            k: 3.0,
            d: 0.5,
            g: 2.0,
        }];
        let without = physics_loss(&[1.0], &[2.0], &[2.5], &[0.0], &[1.0], &theta, false);
        assert!((without - 4.0).abs() < 1e-15);
        let with = physics_loss(&[1.0], &[2.0], &[2.5], &[0.0], &[1.0], &theta, true);
        assert!((with - 4.25).abs() < 1e-15);
    }

    #[test]
    fn hint_loss_weights_and_degenerate_case() {
        let theta = [
            Coefficients { k: 1.0, d: 0.0, g: 0.0 },
            Coefficients { k: 0.0, d: 0.0, g: 0.0 },
        ];
        let hints = [
            Hint {
                center: 0,
                theta: Coefficients { k: 0.0, d: 0.0, g: 0.0 },
                weight: 1.0,
            },
            Hint {
                center: 1,
                theta: Coefficients { k: 10.0, d: 0.0, g: 0.0 },
                weight: 3.0,
            },
        ];
        // (1*1 + 3*100) / 4 = 75.25
        let l = hint_loss(&theta, &hints);
        assert!((l - 75.25).abs() < 1e-12);
        let zeroed = [
            Hint { weight: 0.0, ..hints[0] },
            Hint { weight: 0.0, ..hints[1] },
        ];
        assert_eq!(hint_loss(&theta, &zeroed), 0.0);
    }

    #[test]
    fn smoothness_loss_pools_across_series() {
        let a = [
            Coefficients { k: 0.0, d: 0.0, g: 0.0 },
            Coefficients { k: 1.0, d: 0.0, g: 0.0 },
            Coefficients { k: 1.0, d: 2.0, g: 0.0 },
        ];
        let b = [
            Coefficients { k: 0.0, d: 0.0, g: 1.0 },
            Coefficients { k: 0.0, d: 0.0, g: 0.0 },
        ];
        // Steps: |1| and |2| in a, |1| in b -> (1 + 2 + 1) / 3.
        let l = smoothness_loss(&[&a, &b]);
        assert!((l - 4.0 / 3.0).abs() < 1e-15);
        let flat = [Coefficients { k: 5.0, d: 5.0, g: 5.0 }; 4];
        assert_eq!(smoothness_loss(&[&flat]), 0.0);
    }

    #[test]
    fn rollout_loss_hand_example() {
        let pred = [State { y: 1.0, v: 0.0 }, State { y: 0.0, v: 1.0 }];
        let target = [State { y: 0.0, v: 0.0 }, State { y: 0.0, v: 0.0 }];
        assert_eq!(rollout_loss(&pred, &target), 1.0);
    }
}

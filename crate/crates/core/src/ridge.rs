//! Windowed ridge regression over reconstructed trajectories.
//!
//! On a grid of reconstruction samples, each point gets a centered window
//! (clamped inward at the ends). Within a window, the second-order form
//! `vdot = -k y - d v + g u` is a linear model in (k, d, g); a ridge solve of
//! that tiny system yields a local coefficient estimate, and the conditioning
//! of the window's normal matrix — the ratio of its extreme eigenvalues —
//! weights how much the estimate is trusted downstream.
//!
//! Estimates are attached to training as targets only; no gradient flows
//! through them.

use crate::surrogate::Coefficients;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Smallest usable window: at least a little redundancy over 3 unknowns.
pub const MIN_WINDOW: usize = 5;
/// Largest window drawn.
pub const MAX_WINDOW: usize = 129;

/// Local estimate for one grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hint {
    /// Grid index the window is centered on.
    pub center: usize,
    pub theta: Coefficients,
    /// Trust in [0, 1]: reciprocal condition number of the window's normal
    /// matrix; 0 marks an unusable window.
    pub weight: f64,
}

/// Draws an odd window length uniformly from {5, 7, ..., min(n, 129)}.
/// `None` when the grid is too short for the smallest window.
pub fn sample_window_length(rng: &mut ChaCha8Rng, n: usize) -> Option<usize> {
    let hi = n.min(MAX_WINDOW);
    if hi < MIN_WINDOW {
        return None;
    }
    let hi_odd = if hi % 2 == 0 { hi - 1 } else { hi };
    if hi_odd < MIN_WINDOW {
        return None;
    }
    let choices = (hi_odd - MIN_WINDOW) / 2 + 1;
    Some(MIN_WINDOW + 2 * rng.gen_range(0..choices))
}

/// Half-open index range of the window centered on `center`, shifted inward
/// so it always fits.
pub fn window_bounds(n: usize, w: usize, center: usize) -> (usize, usize) {
    debug_assert!(w <= n && center < n);
    let half = w / 2;
    let start = center.saturating_sub(half).min(n - w);
    (start, start + w)
}

/// Eigenvalues of a symmetric 3x3 matrix, ascending, by the trigonometric
/// closed form.
pub fn sym3_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        return d;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let inv_p = 1.0 / p;
    let b = [
        [
            (a[0][0] - q) * inv_p,
            a[0][1] * inv_p,
            a[0][2] * inv_p,
        ],
        [
            a[0][1] * inv_p,
            (a[1][1] - q) * inv_p,
            a[1][2] * inv_p,
        ],
        [
            a[0][2] * inv_p,
            a[1][2] * inv_p,
            (a[2][2] - q) * inv_p,
        ],
    ];
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let two_pi_third = 2.0 * std::f64::consts::PI / 3.0;
    let e_hi = q + 2.0 * p * phi.cos();
    let e_lo = q + 2.0 * p * (phi + two_pi_third).cos();
    let e_mid = 3.0 * q - e_hi - e_lo;
    [e_lo, e_mid, e_hi]
}

/// Reciprocal condition number of a symmetric PSD 3x3 matrix in [0, 1].
/// The matrix is scaled by its largest entry first, so the result is
/// invariant to the overall signal magnitude.
pub fn reliability(normal: &[[f64; 3]; 3]) -> f64 {
    let mut m = 0.0f64;
    for row in normal {
        for &x in row {
            m = m.max(x.abs());
        }
    }
    if m == 0.0 || !m.is_finite() {
        return 0.0;
    }
    let inv = 1.0 / m;
    let scaled = [
        [normal[0][0] * inv, normal[0][1] * inv, normal[0][2] * inv],
        [normal[1][0] * inv, normal[1][1] * inv, normal[1][2] * inv],
        [normal[2][0] * inv, normal[2][1] * inv, normal[2][2] * inv],
    ];
    let eigs = sym3_eigenvalues(&scaled);
    let lo = eigs[0].max(0.0);
    let hi = eigs[2];
    if hi <= 0.0 || !lo.is_finite() || !hi.is_finite() {
        return 0.0;
    }
    (lo / hi).clamp(0.0, 1.0)
}

/// Solves `(A + lambda I) x = b` for symmetric 3x3 `A` by Gaussian
/// elimination with partial pivoting; `None` on a (numerically) singular
/// system.
pub fn solve_ridge_3x3(normal: &[[f64; 3]; 3], rhs: &[f64; 3], lambda: f64) -> Option<[f64; 3]> {
    let x = eliminate(normal, rhs, lambda)?;
    // One step of iterative refinement buys back the digits that a poorly
    // conditioned window loses to rounding.
    let mut r = [0.0f64; 3];
    for i in 0..3 {
        let mut acc = rhs[i] - lambda * x[i];
        for j in 0..3 {
            acc -= normal[i][j] * x[j];
        }
        r[i] = acc;
    }
    let dx = eliminate(normal, &r, lambda)?;
    let refined = [x[0] + dx[0], x[1] + dx[1], x[2] + dx[2]];
    if refined.iter().all(|v| v.is_finite()) {
        Some(refined)
    } else {
        None
    }
}

fn eliminate(normal: &[[f64; 3]; 3], rhs: &[f64; 3], lambda: f64) -> Option<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = normal[i][j];
        }
        m[i][i] += lambda;
        m[i][3] = rhs[i];
    }
    for col in 0..3 {
        let mut piv = col;
        for row in col + 1..3 {
            if m[row][col].abs() > m[piv][col].abs() {
                piv = row;
            }
        }
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for j in col..4 {
                m[row][j] -= f * m[col][j];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for i in (0..3).rev() {
        let mut acc = m[i][3];
        for j in i + 1..3 {
            acc -= m[i][j] * x[j];
        }
        x[i] = acc / m[i][i];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Local ridge estimates at every grid point, from reconstructed states, the
/// reconstructed acceleration, and the input, all sampled on the same grid.
///
/// The ridge strength adapts to the window's signal energy:
/// `lambda = lambda0 * trace(normal) / (3 w)`. Windows whose normal matrix is
/// exactly zero or singular come back with weight 0.
pub fn compute_hints(
    y: &[f64],
    v: &[f64],
    vdot: &[f64],
    u: &[f64],
    w: usize,
    lambda0: f64,
) -> Vec<Hint> {
    let n = y.len();
    assert_eq!(v.len(), n);
    assert_eq!(vdot.len(), n);
    assert_eq!(u.len(), n);
    assert!(w >= 3 && w <= n, "window {w} out of range for {n} samples");
    let mut hints = Vec::with_capacity(n);
    for center in 0..n {
        let (lo, hi) = window_bounds(n, w, center);
        // Accumulate the normal equations of vdot = [-y, -v, u] theta.
        let mut a = [[0.0f64; 3]; 3];
        let mut b = [0.0f64; 3];
        for i in lo..hi {
            let phi = [-y[i], -v[i], u[i]];
            for r in 0..3 {
                for c in r..3 {
                    a[r][c] += phi[r] * phi[c];
                }
                b[r] += phi[r] * vdot[i];
            }
        }
        for r in 0..3 {
            for c in 0..r {
                a[r][c] = a[c][r];
            }
        }
        let trust = reliability(&a);
        let trace = a[0][0] + a[1][1] + a[2][2];
        let lambda = lambda0 * trace / (3.0 * w as f64);
        let theta = if trust > 0.0 {
            solve_ridge_3x3(&a, &b, lambda)
        } else {
            None
        };
        match theta {
            Some([k, d, g]) => hints.push(Hint {
                center,
                theta: Coefficients { k, d, g },
                weight: trust,
            }),
            None => hints.push(Hint {
                center,
                theta: Coefficients {
                    k: 0.0,
                    d: 0.0,
                    g: 0.0,
                },
                weight: 0.0,
            }),
        }
    }
    hints
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn window_length_is_odd_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen_min = usize::MAX;
        let mut seen_max = 0;
        for _ in 0..2000 {
            let w = sample_window_length(&mut rng, 1000).unwrap();
            assert!(w % 2 == 1);
            assert!((MIN_WINDOW..=MAX_WINDOW).contains(&w));
            seen_min = seen_min.min(w);
            seen_max = seen_max.max(w);
        }
        assert_eq!(seen_min, 5);
        assert_eq!(seen_max, 129);
    }

    #[test]
    fn window_length_respects_short_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_window_length(&mut rng, 4), None);
        for _ in 0..50 {
            assert_eq!(sample_window_length(&mut rng, 5), Some(5));
            assert_eq!(sample_window_length(&mut rng, 6), Some(5));
            let w = sample_window_length(&mut rng, 9).unwrap();
            assert!(w == 5 || w == 7 || w == 9);
        }
    }

    #[test]
    fn window_bounds_clamp_inward() {
        assert_eq!(window_bounds(10, 5, 0), (0, 5));
        assert_eq!(window_bounds(10, 5, 1), (0, 5));
        assert_eq!(window_bounds(10, 5, 2), (0, 5));
        assert_eq!(window_bounds(10, 5, 3), (1, 6));
        assert_eq!(window_bounds(10, 5, 5), (3, 8));
        assert_eq!(window_bounds(10, 5, 8), (5, 10));
        assert_eq!(window_bounds(10, 5, 9), (5, 10));
        assert_eq!(window_bounds(7, 7, 3), (0, 7));
    }

    #[test]
    fn eigenvalues_of_diagonal_matrix() {
        let a = [[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        let e = sym3_eigenvalues(&a);
        assert_eq!(e, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigenvalues_of_block_matrix() {
        // [[2,1,0],[1,2,0],[0,0,5]] has eigenvalues 1, 3, 5.
        let a = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let e = sym3_eigenvalues(&a);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 3.0).abs() < 1e-12);
        assert!((e[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_sum_and_product_match_trace_and_det() {
        // Random symmetric matrices: invariants pin the closed form.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let mut a = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    let x = rng.gen_range(-2.0..2.0);
                    a[i][j] = x;
                    a[j][i] = x;
                }
            }
            let e = sym3_eigenvalues(&a);
            let trace = a[0][0] + a[1][1] + a[2][2];
            let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
            assert!((e[0] + e[1] + e[2] - trace).abs() < 1e-9, "trace");
            assert!((e[0] * e[1] * e[2] - det).abs() < 1e-9, "determinant");
            assert!(e[0] <= e[1] && e[1] <= e[2], "ordering");
        }
    }

    #[test]
    fn reliability_is_scale_invariant_and_bounded() {
        let a = [[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let r1 = reliability(&a);
        let mut b = a;
        for row in b.iter_mut() {
            for x in row.iter_mut() {
                *x *= 1e9;
            }
        }
        let r2 = reliability(&b);
        assert!(r1 > 0.0 && r1 < 1.0);
        assert!((r1 - r2).abs() < 1e-12);
        assert_eq!(reliability(&[[0.0; 3]; 3]), 0.0);
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!((reliability(&id) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_solve_matches_hand_solved_system() {
        // A = [[2,1,0],[1,3,1],[0,1,2]], b = [3,7,5]. By substitution:
        // x1 = (3 - x2)/2, x3 = (5 - x2)/2, and the middle equation gives
        // 4 + 2 x2 = 7, so x = (0.75, 1.5, 1.75).
        let a = [[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let b = [3.0, 7.0, 5.0];
        let x = solve_ridge_3x3(&a, &b, 0.0).unwrap();
        assert!((x[0] - 0.75).abs() < 1e-12);
        assert!((x[1] - 1.5).abs() < 1e-12);
        assert!((x[2] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn ridge_solve_refuses_singular_system() {
        let a = [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(solve_ridge_3x3(&a, &[1.0, 1.0, 0.0], 0.0), None);
        // The same system regularized becomes solvable.
        assert!(solve_ridge_3x3(&a, &[1.0, 1.0, 0.0], 0.1).is_some());
    }

    #[test]
    fn ridge_shrinks_the_estimate() {
        let a = [[2.0, 0.3, 0.1], [0.3, 1.5, 0.2], [0.1, 0.2, 1.0]];
        let b = [1.0, 2.0, 3.0];
        let x0 = solve_ridge_3x3(&a, &b, 0.0).unwrap();
        let x1 = solve_ridge_3x3(&a, &b, 10.0).unwrap();
        let n0: f64 = x0.iter().map(|v| v * v).sum();
        let n1: f64 = x1.iter().map(|v| v * v).sum();
        assert!(n1 < n0);
    }

    /// Clean consistent data from a known linear system: the estimates must
    /// recover the generating coefficients to near machine precision when
    /// the ridge term vanishes.
    #[test]
    fn exact_recovery_on_consistent_linear_data() {
        let (k, d, g) = (4.0, 1.0, 3.0);
        let n = 200;
        let dt = 0.02;
        let mut y = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut vdot = vec![0.0; n];
        let mut u = vec![0.0; n];
        for i in 0..n {
            let t = i as f64 * dt;
            // Rich, smooth state signals whose variation is fast relative to
            // the window span, so every window is well conditioned; the
            // input is chosen so the model holds exactly:
            // u = (vdot + k y + d v) / g.
            y[i] = (5.0 * t).sin() + 0.5 * (11.0 * t).cos();
            v[i] = 5.0 * (5.0 * t).cos() - 5.5 * (11.0 * t).sin();
            vdot[i] = -25.0 * (5.0 * t).sin() - 60.5 * (11.0 * t).cos();
            u[i] = (vdot[i] + k * y[i] + d * v[i]) / g;
        }
        let hints = compute_hints(&y, &v, &vdot, &u, 21, 0.0);
        assert_eq!(hints.len(), n);
        for h in &hints {
            assert!(h.weight > 0.0, "window at {} unusable", h.center);
            assert!((h.theta.k - k).abs() < 1e-10, "k at {}: {}", h.center, h.theta.k);
            assert!((h.theta.d - d).abs() < 1e-10, "d at {}: {}", h.center, h.theta.d);
            assert!((h.theta.g - g).abs() < 1e-10, "g at {}: {}", h.center, h.theta.g);
        }
    }

    #[test]
    fn degenerate_windows_get_zero_weight() {
        // Constant signals: phi rows are identical, the normal matrix is
        // rank 1, no estimate should be trusted.
        let n = 30;
        let y = vec![1.0; n];
        let v = vec![0.0; n];
        let vdot = vec![0.0; n];
        let u = vec![0.5; n];
        let hints = compute_hints(&y, &v, &vdot, &u, 5, 0.0);
        for h in hints {
            assert_eq!(h.weight, 0.0);
            assert_eq!(h.theta.k, 0.0);
        }
    }

    #[test]
    fn adaptive_ridge_tracks_signal_scale() {
        // Same shape at two scales: with lambda0 > 0 the relative shrinkage
        // must match because lambda tracks trace(normal).
        let n = 60;
        let dt = 0.05;
        let build = |amp: f64| {
            let mut y = vec![0.0; n];
            let mut v = vec![0.0; n];
            let mut vdot = vec![0.0; n];
            let mut u = vec![0.0; n];
            for i in 0..n {
                let t = i as f64 * dt;
                y[i] = amp * ((3.0 * t).sin() + 0.8 * (7.0 * t).cos());
                v[i] = amp * (3.0 * (3.0 * t).cos() - 5.6 * (7.0 * t).sin());
                vdot[i] = amp * (-9.0 * (3.0 * t).sin() - 39.2 * (7.0 * t).cos());
                u[i] = (vdot[i] + 4.0 * y[i] + 1.0 * v[i]) / 3.0;
            }
            compute_hints(&y, &v, &vdot, &u, 11, 0.5)
        };
        let small = build(1.0);
        let large = build(1000.0);
        for (a, b) in small.iter().zip(&large) {
            assert!(
                (a.theta.k - b.theta.k).abs() < 1e-6,
                "scale changed the regularized estimate: {} vs {}",
                a.theta.k,
                b.theta.k
            );
        }
    }
}

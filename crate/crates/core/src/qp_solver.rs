//! Small dense QPs over per-contact capped simplices.
//!
//! The solver minimizes
//!
//! ```text
//! f(dw) = 1/2 dw^T Q dw + q^T dw + |dw|^2 / gamma
//! ```
//!
//! subject to `w + dw` lying in each contact's capped simplex
//! `{u >= 0, sum(u) <= 1}`. `Q` only needs to be PSD; the proximal term
//! makes the objective strongly convex, so the minimizer is unique.
//! Problems are tiny (W up to a few dozen), so an accelerated projected
//! gradient with exact per-block projections and monotone restarts is both
//! simple and fast.

use nalgebra::{DMatrix, DVector};
use std::ops::Range;

/// Euclidean projection onto the capped simplex `{u >= 0, sum(u) <= 1}`.
///
/// Clip negatives; if the clipped point oversteps the cap, the projection
/// lies on the `sum = 1` face and equals the standard simplex projection:
/// shift by the threshold that makes the positive part sum to one, re-clip.
pub fn project_capped_simplex(u: &DVector<f64>) -> DVector<f64> {
    let clipped = u.map(|x| x.max(0.0));
    if clipped.sum() <= 1.0 {
        return clipped;
    }
    // Sort descending and find the largest k with u_(k) - tau_k > 0.
    let mut sorted: Vec<f64> = u.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &val) in sorted.iter().enumerate() {
        cumsum += val;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if val - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    u.map(|x| (x - tau).max(0.0))
}

/// One QP instance. The constraint applies to `w_current + dw` blockwise.
pub struct QpProblem {
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    /// Partition of `0..W` by contact.
    pub blocks: Vec<Range<usize>>,
    pub w_current: DVector<f64>,
    /// Proximal weight; the objective carries `|dw|^2 / gamma`.
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub dw: DVector<f64>,
    /// Projected-gradient fixed-point residual (inf norm).
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

fn project_blocks(p: &QpProblem, dw: &DVector<f64>) -> DVector<f64> {
    let mut out = dw.clone();
    for block in &p.blocks {
        let len = block.len();
        let u = DVector::from_fn(len, |i, _| p.w_current[block.start + i] + dw[block.start + i]);
        let proj = project_capped_simplex(&u);
        for i in 0..len {
            out[block.start + i] = proj[i] - p.w_current[block.start + i];
        }
    }
    out
}

/// Symmetrize and floor negative eigenvalues at zero. Guards against Q
/// assembled from a slightly indefinite Hessian.
pub fn psd_floor(q: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig >= 0.0 {
        return sym;
    }
    let floored = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose()
}

/// Solve the capped-simplex QP by accelerated projected gradient with a
/// monotone restart. Every iterate is feasible; on `MaxIter` the best
/// iterate seen is returned.
pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    assert!(p.gamma > 0.0, "gamma must be positive");
    let w_dim = p.q_vec.len();
    if w_dim == 0 {
        return QpSolution {
            dw: DVector::zeros(0),
            kkt_residual: 0.0,
            iterations: 0,
            status: QpStatus::Converged,
        };
    }
    let two_over_gamma = 2.0 / p.gamma;
    let grad = |x: &DVector<f64>| &p.q_mat * x + &p.q_vec + x * two_over_gamma;
    let value = |x: &DVector<f64>| {
        0.5 * (x.transpose() * &p.q_mat * x)[(0, 0)]
            + p.q_vec.dot(x)
            + x.norm_squared() / p.gamma
    };

    // Lipschitz bound: row-sum norm dominates the spectral norm for the
    // symmetric part.
    let lip = p
        .q_mat
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max)
        + two_over_gamma;
    let step = 1.0 / lip.max(1e-300);

    let scale = p.q_vec.amax().max(1.0);
    let mut x = project_blocks(p, &DVector::zeros(w_dim));
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut kkt = f64::INFINITY;

    for iter in 0..max_iter {
        // Plain projected-gradient step from the current iterate: monotone
        // for step <= 1/L, and also the KKT fixed-point probe.
        let g = grad(&x);
        let pg = project_blocks(p, &(&x - &g * step));
        kkt = (&pg - &x).amax() / step;
        if kkt <= tol * scale {
            return QpSolution {
                dw: pg,
                kkt_residual: kkt,
                iterations: iter + 1,
                status: QpStatus::Converged,
            };
        }
        // Accelerated candidate; fall back to the monotone step whenever
        // the momentum overshoots.
        let gy = grad(&y);
        let cand = project_blocks(p, &(&y - &gy * step));
        let (x_next, restart) = if value(&cand) <= value(&pg) {
            (cand, false)
        } else {
            (pg, true)
        };
        if restart {
            t = 1.0;
            y = x_next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            t = t_next;
        }
        x = x_next;
    }
    QpSolution {
        dw: x,
        kkt_residual: kkt,
        iterations: max_iter,
        status: QpStatus::MaxIter,
    }
}

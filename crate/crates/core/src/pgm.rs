//! Projected gradient method for the coupled contact/dynamics problem.
//!
//! One solve advances the robot by `alpha * dt`: minimize the post-step
//! kinetic energy `K(theta)` over contact weights `w` subject to the
//! backward-Euler residual `G(theta, w) = 0`. The loop alternates
//!
//! 1. a capped-simplex QP in `dw` built from the constraint-eliminated
//!    quadratic model of `K` (first order uses the exact residual Jacobian,
//!    zeroth order the inexact one that drops every vertex Jacobian), and
//! 2. a Newton projection of `theta` back onto the manifold
//!    `G(theta, w) = 0` at the updated weights.
//!
//! Rejected steps shrink the proximal weight `gamma` (smaller `dw`),
//! accepted ones grow it, so accepted iterates keep `K` non-increasing.
//! Projection failures (residual increase, singular Jacobian, iteration
//! cap) surface as errors: the caller reacts by halving the timestep.

use crate::dynamics::{
    kinetic_energy, residual, DynamicsError, Formulation, StateTriple, TorqueModel, World,
};
use crate::qp_solver::{self, psd_floor, QpProblem};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Which residual Jacobian drives the projection and the QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientOrder {
    First,
    Zeroth,
}

#[derive(Debug, Clone)]
pub struct PgmConfig {
    /// Outer convergence tolerance on `|theta_k - theta_{k-1}|_inf`.
    pub epsilon: f64,
    /// Proximal growth/shrink factor, > 1.
    pub eta: f64,
    /// Initial proximal weight.
    pub gamma0: f64,
    pub gamma_max: f64,
    /// Manifold residual tolerance, relative to `max(1, |B(theta_prev, w)|)`.
    pub epsilon_g: f64,
    pub max_outer: usize,
    pub max_proj: usize,
    /// Rank-revealing pivot ratio below which the Jacobian counts as
    /// singular.
    pub singular_threshold: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for PgmConfig {
    fn default() -> Self {
        PgmConfig {
            epsilon: 1e-6,
            eta: 1.5,
            gamma0: 1.0,
            gamma_max: 1e6,
            epsilon_g: 1e-10,
            max_outer: 200,
            max_proj: 50,
            singular_threshold: 1e-12,
            qp_tol: 1e-10,
            qp_max_iter: 2000,
        }
    }
}

#[derive(Debug, Error)]
pub enum PgmError {
    /// The residual Jacobian lost rank (chart singularity or degenerate
    /// inertia). The step should be rejected, possibly after re-charting.
    #[error("residual Jacobian is numerically singular")]
    SingularJacobian,
    /// `|G|` stopped decreasing or the projection ran out of iterations;
    /// the caller should halve the timestep.
    #[error("manifold projection diverged")]
    DivergedProjection,
    /// First-order PGM was requested but a contact cannot provide vertex
    /// Jacobians.
    #[error("vertex Jacobians unavailable; use the zeroth-order solver")]
    VertexJacobianUnavailable,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmStatus {
    Converged,
    MaxIter,
}

/// Diagnostics of one solve. `v_history` records the Lyapunov candidate
/// `V = |G|^2` at every projection iterate; `contraction_ratios` the
/// per-Newton-step ratios `V+ / V`; `k_history` the kinetic energy of
/// accepted outer iterates (non-increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct PgmStats {
    pub outer_iterations: usize,
    pub projection_iterations: Vec<usize>,
    pub k_history: Vec<f64>,
    pub v_history: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub residual_norms: Vec<f64>,
    /// Scale used for each entry of `residual_norms` (the manifold
    /// tolerance is `epsilon_g * scale`).
    pub residual_scales: Vec<f64>,
    pub rejected_steps: usize,
    pub status: PgmStatus,
}

impl PgmStats {
    fn new() -> Self {
        PgmStats {
            outer_iterations: 0,
            projection_iterations: Vec::new(),
            k_history: Vec::new(),
            v_history: Vec::new(),
            contraction_ratios: Vec::new(),
            residual_norms: Vec::new(),
            residual_scales: Vec::new(),
            rejected_steps: 0,
            status: PgmStatus::MaxIter,
        }
    }

    pub fn total_projection_iterations(&self) -> usize {
        self.projection_iterations.iter().sum()
    }
}

/// Stats of a single manifold projection.
#[derive(Debug, Clone)]
pub struct ProjStats {
    pub iterations: usize,
    pub v_history: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub final_residual: f64,
    pub scale: f64,
}

struct Factored {
    lu: nalgebra::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Factored {
    fn new(j: &DMatrix<f64>, singular_threshold: f64) -> Result<Self, PgmError> {
        if j.iter().any(|v| !v.is_finite()) {
            return Err(PgmError::DivergedProjection);
        }
        let lu = j.clone().full_piv_lu();
        let n = j.nrows();
        if n > 0 {
            let u = lu.u();
            let mut dmin = f64::INFINITY;
            let mut dmax = 0.0_f64;
            for i in 0..n {
                let d = u[(i, i)].abs();
                dmin = dmin.min(d);
                dmax = dmax.max(d);
            }
            if dmax == 0.0 || dmin / dmax < singular_threshold {
                return Err(PgmError::SingularJacobian);
            }
        }
        Ok(Factored { lu })
    }

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(b).expect("factorization checked nonsingular")
    }

    fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lu.solve(b).expect("factorization checked nonsingular")
    }

    fn solve_transpose_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        // Solve J^T x = b via the explicit inverse transpose; sizes are
        // small and the factorization is already rank-checked.
        let inv = self
            .lu
            .try_inverse()
            .expect("factorization checked nonsingular");
        inv.transpose() * b
    }
}

fn pick_jacobian<'a>(
    bundle: &'a crate::dynamics::ResidualBundle,
    order: GradientOrder,
) -> Result<&'a DMatrix<f64>, PgmError> {
    match order {
        GradientOrder::First => bundle
            .dg_dtheta_exact
            .as_ref()
            .ok_or(PgmError::VertexJacobianUnavailable),
        GradientOrder::Zeroth => Ok(&bundle.dg_dtheta_inexact),
    }
}

/// Residual scale for the manifold tolerance: `max(1, |B(theta_prev, w)|)`,
/// the residual magnitude at the projection's starting point.
fn residual_scale(
    form: Formulation,
    world: &World,
    s: &StateTriple,
    w: &DVector<f64>,
    torque: Option<&dyn TorqueModel>,
) -> Result<f64, PgmError> {
    let at_prev = s.with_theta(s.theta_prev.clone());
    let bundle = residual(form, world, &at_prev, w, torque)?;
    Ok(bundle.b_part.norm().max(1.0))
}

/// Newton projection onto `G(theta, w) = 0` at fixed weights, starting from
/// `s.theta`. Converges when `|G| <= epsilon_g * scale`; any residual
/// increase or the iteration cap reports divergence.
pub fn manifold_project(
    form: Formulation,
    order: GradientOrder,
    world: &World,
    s: &StateTriple,
    w: &DVector<f64>,
    torque: Option<&dyn TorqueModel>,
    cfg: &PgmConfig,
) -> Result<(DVector<f64>, ProjStats), PgmError> {
    let scale = residual_scale(form, world, s, w, torque)?;
    let tol = cfg.epsilon_g * scale;
    let mut theta = s.theta.clone();
    let mut stats = ProjStats {
        iterations: 0,
        v_history: Vec::new(),
        contraction_ratios: Vec::new(),
        final_residual: f64::INFINITY,
        scale,
    };
    let mut prev_norm = f64::INFINITY;
    for _ in 0..=cfg.max_proj {
        let bundle = residual(form, world, &s.with_theta(theta.clone()), w, torque)?;
        let norm = bundle.g.norm();
        if !norm.is_finite() {
            return Err(PgmError::DivergedProjection);
        }
        stats.v_history.push(norm * norm);
        if prev_norm.is_finite() {
            stats
                .contraction_ratios
                .push((norm * norm) / (prev_norm * prev_norm));
        }
        if norm <= tol {
            stats.final_residual = norm;
            return Ok((theta, stats));
        }
        if norm >= prev_norm {
            return Err(PgmError::DivergedProjection);
        }
        if stats.iterations == cfg.max_proj {
            break;
        }
        let jac = pick_jacobian(&bundle, order)?;
        let factored = Factored::new(jac, cfg.singular_threshold)?;
        theta -= factored.solve_vec(&bundle.g);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PgmError::DivergedProjection);
        }
        prev_norm = norm;
        stats.iterations += 1;
    }
    Err(PgmError::DivergedProjection)
}

/// Explicit-Euler integration of the negative gradient flow
/// `thetad = -dV/dtheta`, `V = |G|^2`, with the step halved on any `V`
/// increase. Test oracle only: slow but independent of the Newton path.
pub fn gradient_flow_project(
    form: Formulation,
    world: &World,
    s: &StateTriple,
    w: &DVector<f64>,
    torque: Option<&dyn TorqueModel>,
    step_count: usize,
    step_size: f64,
) -> Result<DVector<f64>, PgmError> {
    let scale = residual_scale(form, world, s, w, torque)?;
    let tol = 1e-10 * scale;
    let mut theta = s.theta.clone();
    let mut h = step_size;
    let mut bundle = residual(form, world, &s.with_theta(theta.clone()), w, torque)?;
    let mut v = bundle.g.norm_squared();
    for _ in 0..step_count {
        if bundle.g.norm() <= tol {
            break;
        }
        let jac = bundle
            .dg_dtheta_exact
            .as_ref()
            .ok_or(PgmError::VertexJacobianUnavailable)?;
        let grad_v = jac.transpose() * &bundle.g * 2.0;
        let candidate = &theta - &grad_v * h;
        let cand_bundle = residual(form, world, &s.with_theta(candidate.clone()), w, torque)?;
        let cand_v = cand_bundle.g.norm_squared();
        if !cand_v.is_finite() || cand_v > v {
            h *= 0.5;
            continue;
        }
        theta = candidate;
        bundle = cand_bundle;
        v = cand_v;
    }
    Ok(theta)
}

/// The reduced gradient of the kinetic energy along the manifold:
/// `-(dG/dw)^T (dG/dtheta)^-T dK/dtheta`, with the Jacobian picked by
/// `order`. Diagnostic; the QP's linear term equals this vector.
pub fn reduced_gradient(
    form: Formulation,
    order: GradientOrder,
    world: &World,
    s: &StateTriple,
    w: &DVector<f64>,
    torque: Option<&dyn TorqueModel>,
    cfg: &PgmConfig,
) -> Result<DVector<f64>, PgmError> {
    let bundle = residual(form, world, s, w, torque)?;
    let kb = kinetic_energy(form, world.robot, s)?;
    let jac = pick_jacobian(&bundle, order)?;
    let factored = Factored::new(jac, cfg.singular_threshold)?;
    let jt_inv_dk = factored.solve_transpose_vec(&kb.dk);
    Ok(-(bundle.dg_dw.transpose() * jt_inv_dk))
}

/// One full PGM solve advancing the state by `alpha * dt`.
///
/// Returns the next configuration, the contact weights, and diagnostics.
/// `Err` values are step-rejection signals for the adaptive stepper;
/// hitting the outer iteration cap is not an error (the best iterate is on
/// the manifold, only the weights stopped improving).
#[allow(clippy::too_many_arguments)]
pub fn pgm_solve(
    form: Formulation,
    order: GradientOrder,
    world: &World,
    alpha: f64,
    dt: f64,
    theta_prev: &DVector<f64>,
    theta_prev2: &DVector<f64>,
    torque: Option<&dyn TorqueModel>,
    cfg: &PgmConfig,
) -> Result<(DVector<f64>, DVector<f64>, PgmStats), PgmError> {
    let n = theta_prev.len();
    let w_dim = world.contacts.weight_dim();
    let mut stats = PgmStats::new();
    let base = StateTriple {
        theta: theta_prev.clone(),
        theta_prev: theta_prev.clone(),
        theta_prev2: theta_prev2.clone(),
        dt,
        alpha,
        tau: DVector::zeros(n),
    };

    // Initial projection at w = 0 from theta_prev.
    let mut w = DVector::zeros(w_dim);
    let (mut theta, proj) = manifold_project(form, order, world, &base, &w, torque, cfg)?;
    stats.projection_iterations.push(proj.iterations);
    stats.v_history.extend(proj.v_history.iter());
    stats.contraction_ratios.extend(proj.contraction_ratios.iter());
    stats.residual_norms.push(proj.final_residual);
    stats.residual_scales.push(proj.scale);

    let mut k_current = kinetic_energy(form, world.robot, &base.with_theta(theta.clone()))?.k;
    stats.k_history.push(k_current);

    if w_dim == 0 {
        stats.status = PgmStatus::Converged;
        return Ok((theta, w, stats));
    }

    let mut gamma = cfg.gamma0;
    for outer in 1..=cfg.max_outer {
        stats.outer_iterations = outer;
        let at_theta = base.with_theta(theta.clone());
        let bundle = residual(form, world, &at_theta, &w, torque)?;
        let kb = kinetic_energy(form, world.robot, &at_theta)?;
        let jac = pick_jacobian(&bundle, order)?;
        let factored = Factored::new(jac, cfg.singular_threshold)?;

        // Constraint elimination: dtheta = S dw with S = -J^-1 dG/dw.
        let s_mat = -factored.solve_mat(&bundle.dg_dw);
        let q_mat = psd_floor(&(s_mat.transpose() * &kb.d2k * &s_mat));
        let q_vec = s_mat.transpose() * &kb.dk;
        let qp = QpProblem {
            q_mat,
            q_vec,
            blocks: world.contacts.blocks().to_vec(),
            w_current: w.clone(),
            gamma,
        };
        let sol = qp_solver::solve(&qp, cfg.qp_tol, cfg.qp_max_iter);

        let mut w_trial = &w + &sol.dw;
        // Guard feasibility against roundoff.
        for block in world.contacts.blocks() {
            let u = DVector::from_fn(block.len(), |i, _| w_trial[block.start + i]);
            let proj = qp_solver::project_capped_simplex(&u);
            for i in 0..block.len() {
                w_trial[block.start + i] = proj[i];
            }
        }

        let projected = manifold_project(
            form,
            order,
            world,
            &base.with_theta(theta.clone()),
            &w_trial,
            torque,
            cfg,
        )
        .or_else(|first_err| {
            // One retry from theta_prev before rejecting the step.
            match first_err {
                PgmError::Dynamics(_) | PgmError::VertexJacobianUnavailable => Err(first_err),
                _ => manifold_project(form, order, world, &base, &w_trial, torque, cfg),
            }
        });
        let (theta_trial, proj) = projected?;
        stats.projection_iterations.push(proj.iterations);
        stats.v_history.extend(proj.v_history.iter());
        stats.contraction_ratios.extend(proj.contraction_ratios.iter());

        let k_trial = kinetic_energy(form, world.robot, &base.with_theta(theta_trial.clone()))?.k;
        if k_trial > k_current {
            // Revert and take smaller weight steps.
            gamma /= cfg.eta;
            stats.rejected_steps += 1;
            if gamma < 1e-14 {
                stats.status = PgmStatus::Converged;
                break;
            }
            continue;
        }
        let step_inf = (&theta_trial - &theta).amax();
        theta = theta_trial;
        w = w_trial;
        k_current = k_trial;
        gamma = (gamma * cfg.eta).min(cfg.gamma_max);
        stats.k_history.push(k_current);
        stats.residual_norms.push(proj.final_residual);
        stats.residual_scales.push(proj.scale);
        if step_inf < cfg.epsilon {
            stats.status = PgmStatus::Converged;
            break;
        }
    }
    Ok((theta, w, stats))
}

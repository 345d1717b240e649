//! Backward-Euler dynamics residuals, kinetic energies, and Jacobians.
//!
//! Two equivalent equation-of-motion forms are supported:
//!
//! - Newton-Euler: `G = H(theta) thetadd + C(theta, thetad) - sum J^T v w - tau`,
//!   assembled in d'Alembert form as the body integral
//!   `integral rho J^T (Xdd - g) dx` so every term closes over the per-link
//!   moment triples.
//! - Position-based: `G = dI/dtheta - sum J^T v w - tau` with the
//!   incremental energy `I` a body integral of squared pose differences
//!   against the two history configurations.
//!
//! Both residuals decompose as `G = A / alpha + B` with `A(theta_prev) = 0`,
//! the split the solver uses for residual scaling. Velocities follow the
//! finite-difference stencil `thetad = (theta - theta_prev) / (alpha dt)`,
//! `thetad_prev = (theta_prev - theta_prev2) / dt`,
//! `thetadd = (thetad - thetad_prev) / dt`.
//!
//! All Jacobians are analytic. The Newton-Euler Jacobian and kinetic-energy
//! Hessian consume velocity-contracted third pose derivatives from
//! [`crate::kinematics::fk_directionals`]; finite differences appear only in
//! tests.

use crate::contact::{assemble_contact_terms, ContactError, ContactSet};
use crate::kinematics::{fk, fk_directionals, fk_poses, KinematicsError};
use crate::robot_model::RobotModel;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error("state triple invalid: {0}")]
    BadState(String),
}

/// Equation-of-motion form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    NewtonEuler,
    PositionBased,
}

/// The robot plus its environment: gravity and the contact set.
pub struct World<'a> {
    pub robot: &'a RobotModel,
    pub gravity: Vector3<f64>,
    pub contacts: &'a ContactSet,
}

/// Discrete state for one backward-Euler solve: the unknown configuration,
/// two history configurations, step scaling, and the feedforward torque.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTriple {
    pub theta: DVector<f64>,
    pub theta_prev: DVector<f64>,
    pub theta_prev2: DVector<f64>,
    /// History spacing (s).
    pub dt: f64,
    /// Sub-step scaling in (0, 1]: the solve advances `alpha * dt`.
    pub alpha: f64,
    /// Feedforward joint torque (N m); controllers add on top.
    pub tau: DVector<f64>,
}

impl StateTriple {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let n = self.theta.len();
        if self.theta_prev.len() != n || self.theta_prev2.len() != n || self.tau.len() != n {
            return Err(DynamicsError::BadState("vector lengths differ".into()));
        }
        if !(self.dt > 0.0) || !(self.alpha > 0.0) {
            return Err(DynamicsError::BadState(format!(
                "dt = {}, alpha = {} must be positive",
                self.dt, self.alpha
            )));
        }
        let finite = self
            .theta
            .iter()
            .chain(self.theta_prev.iter())
            .chain(self.theta_prev2.iter())
            .chain(self.tau.iter())
            .all(|v| v.is_finite());
        if !finite || !self.dt.is_finite() || !self.alpha.is_finite() {
            return Err(DynamicsError::BadState("non-finite entries".into()));
        }
        Ok(())
    }

    /// Advance of this solve, `alpha * dt` (s).
    pub fn step(&self) -> f64 {
        self.alpha * self.dt
    }

    pub fn with_theta(&self, theta: DVector<f64>) -> StateTriple {
        StateTriple {
            theta,
            ..self.clone()
        }
    }
}

/// Finite-difference velocities and acceleration of a state triple:
/// `(thetad, thetad_prev, thetadd)`. Note `thetadd` divides by `dt`, not
/// `alpha * dt`.
pub fn finite_differences(s: &StateTriple) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let thetad = (&s.theta - &s.theta_prev) / (s.alpha * s.dt);
    let thetad_prev = (&s.theta_prev - &s.theta_prev2) / s.dt;
    let thetadd = (&thetad - &thetad_prev) / s.dt;
    (thetad, thetad_prev, thetadd)
}

/// State-dependent torque with Jacobians, e.g. a tracking controller
/// evaluated at the implicit next state.
pub trait TorqueModel {
    fn eval(&self, theta: &DVector<f64>, theta_dot: &DVector<f64>) -> TorqueEval;
}

pub struct TorqueEval {
    pub tau: DVector<f64>,
    pub dtau_dtheta: Option<DMatrix<f64>>,
    pub dtau_dthetadot: Option<DMatrix<f64>>,
}

/// Generalized mass matrix `H = integral rho J^T J dx`, symmetric PSD.
pub fn mass_matrix(model: &RobotModel, theta: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    let cache = fk(model, theta)?;
    Ok(mass_matrix_from(model, &cache))
}

pub fn mass_matrix_from(model: &RobotModel, cache: &crate::kinematics::KinematicCache) -> DMatrix<f64> {
    let n = cache.dof_count;
    let mut h = DMatrix::zeros(n, n);
    for li in 0..model.links.len() {
        let mom = model.moments(li);
        let pose = &cache.poses[li];
        let act = cache.active_dofs(li);
        for (ai, &a) in act.iter().enumerate() {
            let drot_s = pose.drot[a] * mom.second;
            let drot_p = pose.drot[a] * mom.first;
            for &b in &act[ai..] {
                let val = pose.drot[b].dot(&drot_s)
                    + pose.dpos[b].dot(&drot_p)
                    + pose.dpos[a].dot(&(pose.drot[b] * mom.first))
                    + mom.mass * pose.dpos[a].dot(&pose.dpos[b]);
                h[(a, b)] += val;
                if a != b {
                    h[(b, a)] += val;
                }
            }
        }
    }
    h
}

/// Coriolis, centrifugal, and gravity generalized force `C(theta, thetad)`:
/// the d'Alembert body integral `integral rho J^T (quad(thetad) - g) dx`
/// where `quad` is the velocity-quadratic point acceleration.
pub fn bias_force(
    model: &RobotModel,
    gravity: &Vector3<f64>,
    theta: &DVector<f64>,
    theta_dot: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    let cache = fk(model, theta)?;
    let n = cache.dof_count;
    let mut c = DVector::zeros(n);
    for li in 0..model.links.len() {
        let mom = model.moments(li);
        let pose = &cache.poses[li];
        let act = cache.active_dofs(li);
        let mut w_quad = Matrix3::zeros();
        let mut u_quad = Vector3::zeros();
        for &k in act {
            let mut mr = Matrix3::zeros();
            let mut mp = Vector3::zeros();
            for &l in act {
                mr += pose.ddrot_at(k, l, n) * theta_dot[l];
                mp += pose.ddpos_at(k, l, n) * theta_dot[l];
            }
            w_quad += mr * theta_dot[k];
            u_quad += mp * theta_dot[k];
        }
        let u = u_quad - gravity;
        let pre1 = w_quad * mom.second;
        let pre2 = w_quad * mom.first;
        for &i in act {
            c[i] += pose.drot[i].dot(&pre1)
                + (pose.drot[i] * mom.first).dot(&u)
                + pose.dpos[i].dot(&pre2)
                + mom.mass * pose.dpos[i].dot(&u);
        }
    }
    Ok(c)
}

/// Kinetic energy with analytic gradient and Hessian.
///
/// Newton-Euler form: `K = 1/2 thetad^T H(theta) thetad` with the
/// finite-difference velocity. Position-based form:
/// `K = integral rho |X(theta) - X(theta_prev)|^2 / (2 dt^2) dx`.
pub struct KineticBundle {
    pub k: f64,
    pub dk: DVector<f64>,
    pub d2k: DMatrix<f64>,
}

pub fn kinetic_energy(
    form: Formulation,
    model: &RobotModel,
    s: &StateTriple,
) -> Result<KineticBundle, DynamicsError> {
    s.validate()?;
    let cache = fk(model, &s.theta)?;
    let n = cache.dof_count;
    match form {
        Formulation::NewtonEuler => {
            let (thetad, _, _) = finite_differences(s);
            let inv_h = 1.0 / (s.alpha * s.dt);
            // Directionals along nu = alpha * thetad; t2 is linear in the
            // direction so t2(thetad) = t2(nu) / alpha.
            let nu = &thetad * s.alpha;
            let dirs = fk_directionals(model, &cache, &nu, true);
            let mut k = 0.0;
            let mut dk = DVector::zeros(n);
            let mut d2k = DMatrix::zeros(n, n);
            for li in 0..model.links.len() {
                let mom = model.moments(li);
                let pose = &cache.poses[li];
                let act = cache.active_dofs(li);
                let dir = &dirs[li];

                // Body-point velocity map: Rdot x + tdot.
                let mut rdot = Matrix3::zeros();
                let mut tdot = Vector3::zeros();
                for &a in act {
                    rdot += pose.drot[a] * thetad[a];
                    tdot += pose.dpos[a] * thetad[a];
                }
                let rdot_s = rdot * mom.second;
                let rdot_p = rdot * mom.first;
                k += 0.5
                    * (rdot_s.dot(&rdot)
                        + 2.0 * tdot.dot(&rdot_p)
                        + mom.mass * tdot.norm_squared());

                // d(Rdot)/dtheta_j and second derivative contracted once.
                let mut rdot_j = vec![Matrix3::zeros(); n];
                let mut tdot_j = vec![Vector3::zeros(); n];
                for &j in act {
                    let mut mr = pose.drot[j] * inv_h;
                    let mut mp = pose.dpos[j] * inv_h;
                    for &a in act {
                        mr += pose.ddrot_at(a, j, n) * thetad[a];
                        mp += pose.ddpos_at(a, j, n) * thetad[a];
                    }
                    rdot_j[j] = mr;
                    tdot_j[j] = mp;
                    dk[j] += rdot_j[j].dot(&rdot_s)
                        + tdot_j[j].dot(&rdot_p)
                        + tdot.dot(&(rdot_j[j] * mom.first))
                        + mom.mass * tdot.dot(&tdot_j[j]);
                }
                for &j in act {
                    let rdot_j_s = rdot_j[j] * mom.second;
                    let rdot_j_p = rdot_j[j] * mom.first;
                    for &m in act {
                        // Rdot_{jm} = t2(thetad)[j,m] + 2 ddrot[j,m] / h.
                        let rjm = dir.t2_rot[j * n + m] / s.alpha
                            + pose.ddrot_at(j, m, n) * (2.0 * inv_h);
                        let tjm = dir.t2_pos[j * n + m] / s.alpha
                            + pose.ddpos_at(j, m, n) * (2.0 * inv_h);
                        d2k[(j, m)] += (rjm * mom.second).dot(&rdot)
                            + rdot_j_s.dot(&rdot_j[m])
                            + tjm.dot(&rdot_p)
                            + tdot_j[j].dot(&(rdot_j[m] * mom.first))
                            + tdot_j[m].dot(&rdot_j_p)
                            + tdot.dot(&(rjm * mom.first))
                            + mom.mass * (tjm.dot(&tdot) + tdot_j[j].dot(&tdot_j[m]));
                    }
                }
            }
            Ok(KineticBundle { k, dk, d2k })
        }
        Formulation::PositionBased => {
            let prev = fk_poses(model, &s.theta_prev)?;
            let inv_dt2 = 1.0 / (s.dt * s.dt);
            let mut k = 0.0;
            let mut dk = DVector::zeros(n);
            let mut d2k = DMatrix::zeros(n, n);
            for li in 0..model.links.len() {
                let mom = model.moments(li);
                let pose = &cache.poses[li];
                let act = cache.active_dofs(li);
                let dr = pose.rot - prev[li].rot;
                let dp = pose.pos - prev[li].pos;
                let dr_s = dr * mom.second;
                let dr_p = dr * mom.first;
                k += 0.5
                    * inv_dt2
                    * (dr_s.dot(&dr) + 2.0 * dp.dot(&dr_p) + mom.mass * dp.norm_squared());
                for &j in act {
                    dk[j] += inv_dt2
                        * (pose.drot[j].dot(&dr_s)
                            + dp.dot(&(pose.drot[j] * mom.first))
                            + pose.dpos[j].dot(&dr_p)
                            + mom.mass * pose.dpos[j].dot(&dp));
                }
                for &j in act {
                    let drot_j_s = pose.drot[j] * mom.second;
                    let drot_j_p = pose.drot[j] * mom.first;
                    for &m in act {
                        d2k[(j, m)] += inv_dt2
                            * (pose.ddrot_at(j, m, n).dot(&dr_s)
                                + pose.drot[m].dot(&drot_j_s)
                                + dp.dot(&(pose.ddrot_at(j, m, n) * mom.first))
                                + pose.dpos[m].dot(&drot_j_p)
                                + pose.ddpos_at(j, m, n).dot(&dr_p)
                                + pose.dpos[j].dot(&(pose.drot[m] * mom.first))
                                + mom.mass
                                    * (pose.ddpos_at(j, m, n).dot(&dp)
                                        + pose.dpos[j].dot(&pose.dpos[m])));
                    }
                }
            }
            Ok(KineticBundle { k, dk, d2k })
        }
    }
}

/// The residual `G`, its decomposition `G = A / alpha + B`, and all
/// Jacobians the solver consumes. The inexact Jacobian differs from the
/// exact one by exactly the vertex-Jacobian correction
/// `sum_x J_x^T (dv_x/dtheta) w_x`.
pub struct ResidualBundle {
    pub g: DVector<f64>,
    pub dg_dtheta_exact: Option<DMatrix<f64>>,
    pub dg_dtheta_inexact: DMatrix<f64>,
    /// n x W, per-contact blocks `-J_x^T v_x`.
    pub dg_dw: DMatrix<f64>,
    pub a_part: DVector<f64>,
    pub b_part: DVector<f64>,
}

/// Assemble the residual bundle for either formulation.
///
/// `dg_dtheta_exact` is `None` only when some contact cannot provide vertex
/// Jacobians (zeroth-order-only wrench models).
pub fn residual(
    form: Formulation,
    world: &World,
    s: &StateTriple,
    w: &DVector<f64>,
    torque: Option<&dyn TorqueModel>,
) -> Result<ResidualBundle, DynamicsError> {
    s.validate()?;
    let model = world.robot;
    let cache = fk(model, &s.theta)?;
    let n = cache.dof_count;

    // Inertial part in alpha-power groups: G_dyn = I2/alpha^2 + I1/alpha + I0
    // (Newton-Euler) or A_pbd/alpha + B_dyn (position-based), so that
    // A = alpha * (G_dyn - B) is exact by construction.
    let mut i2 = DVector::zeros(n);
    let mut i1 = DVector::zeros(n);
    let mut i0 = DVector::zeros(n);
    let mut di2 = DMatrix::zeros(n, n);
    let mut di1 = DMatrix::zeros(n, n);
    let mut di0 = DMatrix::zeros(n, n);

    match form {
        Formulation::NewtonEuler => {
            let nu = (&s.theta - &s.theta_prev) / s.dt;
            let thetad_prev = (&s.theta_prev - &s.theta_prev2) / s.dt;
            let dirs = fk_directionals(model, &cache, &nu, false);
            for li in 0..model.links.len() {
                let mom = model.moments(li);
                let pose = &cache.poses[li];
                let act = cache.active_dofs(li);
                let dir = &dirs[li];

                // Group integrands: quadratic-in-nu, linear transport, and
                // history/gravity parts.
                let mut ddv_nu_rot = vec![Matrix3::zeros(); n];
                let mut ddv_nu_pos = vec![Vector3::zeros(); n];
                let mut ddv_pv_rot = vec![Matrix3::zeros(); n];
                let mut ddv_pv_pos = vec![Vector3::zeros(); n];
                for &j in act {
                    let mut mr = Matrix3::zeros();
                    let mut mp = Vector3::zeros();
                    let mut mr2 = Matrix3::zeros();
                    let mut mp2 = Vector3::zeros();
                    for &k in act {
                        mr += pose.ddrot_at(k, j, n) * nu[k];
                        mp += pose.ddpos_at(k, j, n) * nu[k];
                        mr2 += pose.ddrot_at(k, j, n) * thetad_prev[k];
                        mp2 += pose.ddpos_at(k, j, n) * thetad_prev[k];
                    }
                    ddv_nu_rot[j] = mr;
                    ddv_nu_pos[j] = mp;
                    ddv_pv_rot[j] = mr2;
                    ddv_pv_pos[j] = mp2;
                }
                let mut w2 = Matrix3::zeros();
                let mut u2 = Vector3::zeros();
                let mut w1 = Matrix3::zeros();
                let mut u1 = Vector3::zeros();
                let mut w0 = Matrix3::zeros();
                let mut u0 = Vector3::zeros();
                for &k in act {
                    w2 += ddv_nu_rot[k] * nu[k];
                    u2 += ddv_nu_pos[k] * nu[k];
                    w1 += pose.drot[k] * (nu[k] / s.dt);
                    u1 += pose.dpos[k] * (nu[k] / s.dt);
                    w0 -= pose.drot[k] * (thetad_prev[k] / s.dt);
                    u0 -= pose.dpos[k] * (thetad_prev[k] / s.dt);
                }
                u0 -= world.gravity;

                accumulate_group(&mut i2, mom, pose, act, &w2, &u2);
                accumulate_group(&mut i1, mom, pose, act, &w1, &u1);
                accumulate_group(&mut i0, mom, pose, act, &w0, &u0);

                // Group Jacobians.
                for &j in act {
                    let w2_j = dir.t1_rot[j] + ddv_nu_rot[j] * (2.0 / s.dt);
                    let u2_j = dir.t1_pos[j] + ddv_nu_pos[j] * (2.0 / s.dt);
                    let w1_j = ddv_nu_rot[j] / s.dt + pose.drot[j] / (s.dt * s.dt);
                    let u1_j = ddv_nu_pos[j] / s.dt + pose.dpos[j] / (s.dt * s.dt);
                    let w0_j = -ddv_pv_rot[j] / s.dt;
                    let u0_j = -ddv_pv_pos[j] / s.dt;
                    accumulate_group_jac(&mut di2, mom, pose, act, n, j, &w2, &u2, &w2_j, &u2_j);
                    accumulate_group_jac(&mut di1, mom, pose, act, n, j, &w1, &u1, &w1_j, &u1_j);
                    accumulate_group_jac(&mut di0, mom, pose, act, n, j, &w0, &u0, &w0_j, &u0_j);
                }
            }
            // Fold the 1/alpha^2 group into I1 so A = I1 + I2/alpha keeps
            // G = A/alpha + B exact.
            i1 += &i2 / s.alpha;
            di1 += &di2 / s.alpha;
        }
        Formulation::PositionBased => {
            let prev = fk_poses(model, &s.theta_prev)?;
            let prev2 = fk_poses(model, &s.theta_prev2)?;
            let inv_dt2 = 1.0 / (s.dt * s.dt);
            for li in 0..model.links.len() {
                let mom = model.moments(li);
                let pose = &cache.poses[li];
                let act = cache.active_dofs(li);

                // A-group: pose difference against theta_prev, scaled 1/dt^2.
                let wa = (pose.rot - prev[li].rot) * inv_dt2;
                let ua = (pose.pos - prev[li].pos) * inv_dt2;
                // B-group: history difference plus gravity.
                let wb = (prev2[li].rot - prev[li].rot) * inv_dt2;
                let ub = (prev2[li].pos - prev[li].pos) * inv_dt2 - world.gravity;

                accumulate_group(&mut i1, mom, pose, act, &wa, &ua);
                accumulate_group(&mut i0, mom, pose, act, &wb, &ub);
                for &j in act {
                    let wa_j = pose.drot[j] * inv_dt2;
                    let ua_j = pose.dpos[j] * inv_dt2;
                    accumulate_group_jac(&mut di1, mom, pose, act, n, j, &wa, &ua, &wa_j, &ua_j);
                    accumulate_group_jac(
                        &mut di0,
                        mom,
                        pose,
                        act,
                        n,
                        j,
                        &wb,
                        &ub,
                        &Matrix3::zeros(),
                        &Vector3::zeros(),
                    );
                }
            }
        }
    }

    // Contact terms and torque, both folded into B.
    let terms = assemble_contact_terms(world.contacts, model, &cache, w)?;
    let (thetad, _, _) = finite_differences(s);
    let mut tau_total = s.tau.clone();
    let mut dtau_dtheta: Option<DMatrix<f64>> = None;
    let mut dtau_dthetadot: Option<DMatrix<f64>> = None;
    if let Some(model_tau) = torque {
        let eval = model_tau.eval(&s.theta, &thetad);
        tau_total += eval.tau;
        dtau_dtheta = eval.dtau_dtheta;
        dtau_dthetadot = eval.dtau_dthetadot;
    }

    let a_part = i1;
    let b_part = i0 - &terms.force_term - &tau_total;
    let g = &a_part / s.alpha + &b_part;

    // Jacobian: common part is dA/alpha + dB minus the point-Hessian
    // contraction; the controller contributes through both arguments.
    let mut dg_common = &di1 / s.alpha + &di0 - &terms.hessian_term;
    if let Some(dt_dth) = &dtau_dtheta {
        dg_common -= dt_dth;
    }
    if let Some(dt_dthd) = &dtau_dthetadot {
        dg_common -= dt_dthd / (s.alpha * s.dt);
    }
    let dg_dtheta_exact = terms
        .vertex_term
        .as_ref()
        .map(|vt| &dg_common - vt);
    let dg_dtheta_inexact = dg_common;

    Ok(ResidualBundle {
        g,
        dg_dtheta_exact,
        dg_dtheta_inexact,
        dg_dw: terms.dg_dw,
        a_part,
        b_part,
    })
}

/// Contribution of one group `(W, u)` to the body integral
/// `integral rho J_i^T (W x + u) dx`.
#[inline]
fn accumulate_group(
    out: &mut DVector<f64>,
    mom: &crate::robot_model::MomentTriple,
    pose: &crate::kinematics::LinkPose,
    act: &[usize],
    w: &Matrix3<f64>,
    u: &Vector3<f64>,
) {
    let pre1 = w * mom.second;
    let pre2 = w * mom.first;
    for &i in act {
        out[i] += pose.drot[i].dot(&pre1)
            + (pose.drot[i] * mom.first).dot(u)
            + pose.dpos[i].dot(&pre2)
            + mom.mass * pose.dpos[i].dot(u);
    }
}

/// Derivative of [`accumulate_group`] with respect to coordinate `j`, given
/// the group's own derivative `(W_j, u_j)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_group_jac(
    out: &mut DMatrix<f64>,
    mom: &crate::robot_model::MomentTriple,
    pose: &crate::kinematics::LinkPose,
    act: &[usize],
    n: usize,
    j: usize,
    w: &Matrix3<f64>,
    u: &Vector3<f64>,
    w_j: &Matrix3<f64>,
    u_j: &Vector3<f64>,
) {
    let pre1 = w * mom.second;
    let pre2 = w * mom.first;
    let pre1_j = w_j * mom.second;
    let pre2_j = w_j * mom.first;
    for &i in act {
        out[(i, j)] += pose.ddrot_at(i, j, n).dot(&pre1)
            + pose.drot[i].dot(&pre1_j)
            + (pose.drot[i] * mom.first).dot(u_j)
            + (pose.ddrot_at(i, j, n) * mom.first).dot(u)
            + pose.ddpos_at(i, j, n).dot(&pre2)
            + pose.dpos[i].dot(&pre2_j)
            + mom.mass * (pose.ddpos_at(i, j, n).dot(u) + pose.dpos[i].dot(u_j));
    }
}

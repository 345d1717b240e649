//! Adaptive time integration and the trajectory driver.
//!
//! [`simulate_adaptive`] advances one step of `alpha * dt`: it runs the PGM
//! solve and, on failure, recursively splits the advance in half. The first
//! half runs at `(alpha/2, dt)`; the second half picks up the first half's
//! realized last step `dt*` and advances the remaining half with
//! `alpha* = (alpha dt) / (2 dt*)`. Sub-step sizes are tracked as exact
//! binary halvings of the requested advance, so within one call they sum to
//! it exactly.
//!
//! [`run_trajectory`] drives whole scenarios at a fixed primary frame rate,
//! carrying `(dt_last, theta_prev, theta_prev2)` across frames, and falls
//! back to the linearized one-QP baseline ([`baseline_mdp_step`]) when the
//! scenario asks for it.

use crate::contact::{ContactForceRecord, ContactSet};
use crate::dynamics::{
    mass_matrix_from, Formulation, StateTriple, TorqueEval, TorqueModel, World,
};
use crate::kinematics::fk;
use crate::pgm::{manifold_project, pgm_solve, GradientOrder, PgmConfig, PgmError, PgmStats, PgmStatus};
use crate::qp_solver::{self, QpProblem};
use crate::robot_model::{
    euler_xyz_angles, euler_xyz_matrix, ControllerSpec, Method, RobotModel, ScenarioSpec,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StepError {
    /// The halving recursion exceeded its depth cap: the timestep underflowed.
    #[error("timestep underflow: recursion depth {depth} exceeded at t = {t:.6} s")]
    TimestepUnderflow { depth: usize, t: f64 },
    #[error("singular mass matrix in baseline step")]
    SingularMassMatrix,
    /// Non-recoverable solver error (bad dimensions, missing Jacobians).
    #[error(transparent)]
    Pgm(PgmError),
    #[error("frame {frame}: {message}")]
    AtFrame { frame: usize, message: String },
}

/// Stepper knobs on top of the PGM configuration.
#[derive(Debug, Clone)]
pub struct StepperConfig {
    pub pgm: PgmConfig,
    /// Hard cap on the halving recursion depth.
    pub depth_max: usize,
    /// Fault-injection hook: any sub-step larger than this is rejected
    /// before the solver runs. Testing only.
    pub max_substep: Option<f64>,
    /// After a subdivided frame completes at its boundary, restart the next
    /// frame from frame-boundary history (restores dt_last = dt_primary).
    pub boundary_reset: bool,
    /// Upper bound on the frame-level alpha.
    pub alpha_max: f64,
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig {
            pgm: PgmConfig::default(),
            depth_max: 12,
            max_substep: None,
            boundary_reset: true,
            alpha_max: 1.0,
        }
    }
}

/// Log of one realized sub-step.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstepLog {
    /// Realized advance (s); an exact binary fraction of the requested one.
    pub advance: f64,
    pub depth: usize,
    pub stats: PgmStats,
}

/// Result of one adaptive advance.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// The realized final sub-step size `dt_last`.
    pub dt_last: f64,
    pub theta: DVector<f64>,
    pub theta_prev: DVector<f64>,
    /// Contact weights of the final sub-step.
    pub weights: DVector<f64>,
    pub substeps: Vec<SubstepLog>,
}

impl StepResult {
    /// Smallest realized sub-step.
    pub fn min_substep(&self) -> f64 {
        self.substeps
            .iter()
            .map(|s| s.advance)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Stable-PD tracking torque evaluated at the implicit next state:
/// `tau = -Kp (theta - theta_target) - Kd thetad`, gains diagonal.
pub struct StablePd {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
    pub theta_target: DVector<f64>,
}

impl TorqueModel for StablePd {
    fn eval(&self, theta: &DVector<f64>, theta_dot: &DVector<f64>) -> TorqueEval {
        let (tau, dth, dthd) = stable_pd(theta, theta_dot, &self.theta_target, &self.kp, &self.kd);
        TorqueEval {
            tau,
            dtau_dtheta: Some(dth),
            dtau_dthetadot: Some(dthd),
        }
    }
}

/// The stable-PD law with its Jacobians `(-diag(Kp), -diag(Kd))`.
pub fn stable_pd(
    theta: &DVector<f64>,
    theta_dot: &DVector<f64>,
    theta_target: &DVector<f64>,
    kp: &DVector<f64>,
    kd: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let tau = -kp.component_mul(&(theta - theta_target)) - kd.component_mul(theta_dot);
    (
        tau,
        DMatrix::from_diagonal(&(-kp)),
        DMatrix::from_diagonal(&(-kd)),
    )
}

/// Controller wiring for one trajectory: gains plus the reference sampled at
/// each sub-step's implicit target time.
pub struct ControllerContext<'a> {
    pub spec: &'a ControllerSpec,
}

struct RecursionCtx<'a> {
    world: &'a World<'a>,
    form: Formulation,
    order: GradientOrder,
    cfg: &'a StepperConfig,
    controller: Option<&'a ControllerContext<'a>>,
}

/// Adaptive advance by `alpha * dt` from history `(theta_prev, theta_prev2)`
/// spaced `dt` apart, starting at absolute time `t0` (used only to sample
/// the reference trajectory).
#[allow(clippy::too_many_arguments)]
pub fn simulate_adaptive(
    world: &World,
    form: Formulation,
    order: GradientOrder,
    alpha: f64,
    dt: f64,
    theta_prev: &DVector<f64>,
    theta_prev2: &DVector<f64>,
    t0: f64,
    controller: Option<&ControllerContext>,
    cfg: &StepperConfig,
) -> Result<StepResult, StepError> {
    let ctx = RecursionCtx {
        world,
        form,
        order,
        cfg,
        controller,
    };
    let advance = alpha * dt;
    let mut substeps = Vec::new();
    let (dt_last, theta, theta_prev_out, weights) =
        simulate_rec(&ctx, advance, dt, theta_prev, theta_prev2, t0, 0, &mut substeps)?;
    Ok(StepResult {
        dt_last,
        theta,
        theta_prev: theta_prev_out,
        weights,
        substeps,
    })
}

/// The recursion of the adaptive scheme. `advance` is the exact target
/// advance; halves of it are exact in binary floating point, so the leaf
/// advances reconstruct the root's advance exactly. The solver's internal
/// `alpha = advance / dt` may differ from the exact ratio by one ulp; the
/// log records the exact dyadic advance.
#[allow(clippy::too_many_arguments)]
fn simulate_rec(
    ctx: &RecursionCtx,
    advance: f64,
    dt: f64,
    theta_prev: &DVector<f64>,
    theta_prev2: &DVector<f64>,
    t0: f64,
    depth: usize,
    substeps: &mut Vec<SubstepLog>,
) -> Result<(f64, DVector<f64>, DVector<f64>, DVector<f64>), StepError> {
    if depth > ctx.cfg.depth_max {
        return Err(StepError::TimestepUnderflow { depth, t: t0 });
    }
    let hook_rejects = ctx
        .cfg
        .max_substep
        .map(|h0| advance > h0 * (1.0 + 1e-12))
        .unwrap_or(false);

    if !hook_rejects {
        let alpha = advance / dt;
        let pd;
        let torque: Option<&dyn TorqueModel> = match ctx.controller {
            Some(c) => {
                pd = StablePd {
                    kp: c.spec.kp.clone(),
                    kd: c.spec.kd.clone(),
                    theta_target: c.spec.reference_at(t0 + advance),
                };
                Some(&pd)
            }
            None => None,
        };
        match pgm_solve(
            ctx.form,
            ctx.order,
            ctx.world,
            alpha,
            dt,
            theta_prev,
            theta_prev2,
            torque,
            &ctx.cfg.pgm,
        ) {
            Ok((theta, w, stats)) => {
                substeps.push(SubstepLog {
                    advance,
                    depth,
                    stats,
                });
                return Ok((advance, theta, theta_prev.clone(), w));
            }
            Err(err @ PgmError::Dynamics(_)) | Err(err @ PgmError::VertexJacobianUnavailable) => {
                return Err(StepError::Pgm(err));
            }
            Err(PgmError::SingularJacobian) if depth == 0 => {
                // Chart trouble at the step's very start cannot be fixed by
                // halving; let the frame driver re-chart and retry.
                return Err(StepError::Pgm(PgmError::SingularJacobian));
            }
            Err(_) => {} // divergence (or deep singularity): subdivide below
        }
    }

    let half = advance * 0.5;
    let (dt1, theta1, theta1_prev, _) =
        simulate_rec(ctx, half, dt, theta_prev, theta_prev2, t0, depth + 1, substeps)?;
    let (dt2, theta2, theta2_prev, w2) = simulate_rec(
        ctx,
        half,
        dt1,
        &theta1,
        &theta1_prev,
        t0 + half,
        depth + 1,
        substeps,
    )?;
    Ok((dt2, theta2, theta2_prev, w2))
}

/// Linearized Newton-Euler baseline: everything evaluated at `theta_prev`,
/// contact weights from a single convex QP minimizing the next-step kinetic
/// energy, then an explicit advance.
pub fn baseline_mdp_step(
    world: &World,
    dt: f64,
    theta_prev: &DVector<f64>,
    theta_prev2: &DVector<f64>,
    tau: &DVector<f64>,
    qp_tol: f64,
    qp_max_iter: usize,
) -> Result<(DVector<f64>, DVector<f64>), StepError> {
    let model = world.robot;
    let cache = fk(model, theta_prev).map_err(|e| StepError::Pgm(PgmError::Dynamics(e.into())))?;
    let h_mat = mass_matrix_from(model, &cache);
    let thetad_prev = (theta_prev - theta_prev2) / dt;
    let c = crate::dynamics::bias_force(model, &world.gravity, theta_prev, &thetad_prev)
        .map_err(|e| StepError::Pgm(PgmError::Dynamics(e)))?;

    let lu = h_mat.clone().lu();
    let free_accel = lu
        .solve(&(tau - &c))
        .ok_or(StepError::SingularMassMatrix)?;
    let thetad_free = &thetad_prev + free_accel * dt;

    let w_dim = world.contacts.weight_dim();
    let w = if w_dim == 0 {
        DVector::zeros(0)
    } else {
        // Force matrix M: column per vertex, J_x^T v_x.
        let mut m_mat = DMatrix::zeros(theta_prev.len(), w_dim);
        for (contact, block) in world.contacts.iter().zip(world.contacts.blocks()) {
            let (link, local) = contact.attachment();
            let jac = crate::kinematics::point_jacobian(&cache, link, &local)
                .map_err(|e| StepError::Pgm(PgmError::Dynamics(e.into())))?;
            let v = contact.vertices(model, &cache);
            let jt_v = jac.transpose() * v;
            m_mat
                .view_mut((0, block.start), (theta_prev.len(), block.len()))
                .copy_from(&jt_v);
        }
        let h_inv_m = lu.solve(&m_mat).ok_or(StepError::SingularMassMatrix)?;
        let q_mat = (m_mat.transpose() * &h_inv_m) * (dt * dt);
        let q_vec = m_mat.transpose() * &thetad_free * dt;
        let qp = QpProblem {
            q_mat: qp_solver::psd_floor(&q_mat),
            q_vec,
            blocks: world.contacts.blocks().to_vec(),
            w_current: DVector::zeros(w_dim),
            // Effectively no proximal bias; the floor keeps it convex.
            gamma: 1e9,
        };
        qp_solver::solve(&qp, qp_tol, qp_max_iter).dw
    };

    let thetad_new = if w_dim == 0 {
        thetad_free
    } else {
        let mut m_w = DVector::zeros(theta_prev.len());
        for (contact, block) in world.contacts.iter().zip(world.contacts.blocks()) {
            let (link, local) = contact.attachment();
            let jac = crate::kinematics::point_jacobian(&cache, link, &local)
                .map_err(|e| StepError::Pgm(PgmError::Dynamics(e.into())))?;
            let v = contact.vertices(model, &cache);
            let wx = DVector::from_iterator(block.len(), block.clone().map(|i| w[i]));
            m_w += jac.transpose() * (v * wx);
        }
        let extra = lu.solve(&m_w).ok_or(StepError::SingularMassMatrix)?;
        thetad_free + extra * dt
    };
    let theta = theta_prev + &thetad_new * dt;
    Ok((theta, w))
}

/// Per-frame status in a trajectory record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    Ok,
    /// Some solve stopped at its outer iteration cap.
    MaxIter,
    Diverged,
}

impl FrameStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameStatus::Ok => "ok",
            FrameStatus::MaxIter => "max_iter",
            FrameStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    pub theta: DVector<f64>,
    pub theta_dot: DVector<f64>,
    /// Kinetic energy `1/2 thetad^T H thetad` at the recorded velocity.
    pub kinetic: f64,
    pub forces: Vec<ContactForceRecord>,
    pub tau: DVector<f64>,
    pub outer_iters: usize,
    pub proj_iters: usize,
    pub dt_realized_min: f64,
    pub status: FrameStatus,
}

/// Everything one simulation run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub method: Method,
    pub dt_primary: f64,
    pub dof_count: usize,
    pub contact_count: usize,
    pub frames: Vec<FrameRecord>,
    pub diverged: bool,
    /// Solver diagnostics of every sub-step, in execution order.
    pub solver_stats: Vec<PgmStats>,
}

fn method_form_order(method: Method) -> Option<(Formulation, GradientOrder)> {
    match method {
        Method::NeMdp => None,
        Method::NeNmdpPgm => Some((Formulation::NewtonEuler, GradientOrder::First)),
        Method::NeNmdpZopgm => Some((Formulation::NewtonEuler, GradientOrder::Zeroth)),
        Method::PbdNmdpPgm => Some((Formulation::PositionBased, GradientOrder::First)),
        Method::PbdNmdpZopgm => Some((Formulation::PositionBased, GradientOrder::Zeroth)),
    }
}

/// Re-express the floating-base chart about the rotation `q_rot` so the
/// current orientation sits at Euler angles zero: the joint origin absorbs
/// the rotation and every supplied configuration is rewritten in the new
/// chart (world poses unchanged).
pub fn rechart_floating_base(
    model: &RobotModel,
    reference: &DVector<f64>,
    states: &mut [&mut DVector<f64>],
) -> Option<RobotModel> {
    let fj = model.floating_joint()?;
    let slice = model.dof_slice(fj);
    let rot_ofs = slice.start + 3;
    let q_ref = Vector3::new(reference[rot_ofs], reference[rot_ofs + 1], reference[rot_ofs + 2]);
    let chart_rot = euler_xyz_matrix(&q_ref);
    if (chart_rot - Matrix3::identity()).norm() < 1e-14 {
        return None;
    }
    let mut joints = model.joints.clone();
    let old_origin = euler_xyz_matrix(&joints[fj].origin_rpy);
    joints[fj].origin_rpy = euler_xyz_angles(&(old_origin * chart_rot));
    let new_model = RobotModel::new(model.links.clone(), joints).ok()?;
    for state in states {
        let t = Vector3::new(state[slice.start], state[slice.start + 1], state[slice.start + 2]);
        let t_new = chart_rot.transpose() * t;
        let r_old = euler_xyz_matrix(&Vector3::new(
            state[rot_ofs],
            state[rot_ofs + 1],
            state[rot_ofs + 2],
        ));
        let r_new = euler_xyz_angles(&(chart_rot.transpose() * r_old));
        state[slice.start] = t_new.x;
        state[slice.start + 1] = t_new.y;
        state[slice.start + 2] = t_new.z;
        state[rot_ofs] = r_new.x;
        state[rot_ofs + 1] = r_new.y;
        state[rot_ofs + 2] = r_new.z;
    }
    Some(new_model)
}

/// Map a configuration expressed in a re-chart back to the original chart.
fn unchart_theta(
    model: &RobotModel,
    cumulative_rot: &Matrix3<f64>,
    theta: &DVector<f64>,
) -> DVector<f64> {
    let mut out = theta.clone();
    if let Some(fj) = model.floating_joint() {
        let slice = model.dof_slice(fj);
        let rot_ofs = slice.start + 3;
        let t = Vector3::new(theta[slice.start], theta[slice.start + 1], theta[slice.start + 2]);
        let t_orig = cumulative_rot * t;
        let r = euler_xyz_matrix(&Vector3::new(
            theta[rot_ofs],
            theta[rot_ofs + 1],
            theta[rot_ofs + 2],
        ));
        let r_orig = euler_xyz_angles(&(cumulative_rot * r));
        out[slice.start] = t_orig.x;
        out[slice.start + 1] = t_orig.y;
        out[slice.start + 2] = t_orig.z;
        out[rot_ofs] = r_orig.x;
        out[rot_ofs + 1] = r_orig.y;
        out[rot_ofs + 2] = r_orig.z;
    }
    out
}

/// Run a scenario to completion at its primary frame rate.
pub fn run_trajectory(scenario: &ScenarioSpec) -> Result<TrajectoryRecord, StepError> {
    run_trajectory_with(scenario, &StepperConfig::default())
}

pub fn run_trajectory_with(
    scenario: &ScenarioSpec,
    cfg: &StepperConfig,
) -> Result<TrajectoryRecord, StepError> {
    let dt = scenario.dt_primary;
    let n_frames = (scenario.duration / dt + 0.5).floor() as usize;
    let contacts = ContactSet::from_scenario(&scenario.robot, &scenario.ground, &scenario.contact);

    // Working copies: the chart may be re-expressed mid-run.
    let mut model = scenario.robot.clone();
    let mut chart_rot = Matrix3::<f64>::identity();
    let mut theta_prev = scenario.initial_theta.clone();
    let mut theta_prev2 = &theta_prev - &scenario.initial_theta_dot * dt;
    let mut dt_last = dt;
    let mut boundary_theta: Option<DVector<f64>> = None;

    let controller_ctx = scenario.controller.as_ref().map(|spec| ControllerContext { spec });
    let mut record = TrajectoryRecord {
        method: scenario.method,
        dt_primary: dt,
        dof_count: model.dof_count(),
        contact_count: contacts.len(),
        frames: Vec::with_capacity(n_frames + 1),
        diverged: false,
        solver_stats: Vec::new(),
    };

    // Reference energy for divergence detection: initial kinetic energy
    // plus the potential available above the ground plane.
    let e_ref = {
        let h = mass_matrix_from(&model, &fk(&model, &theta_prev).map_err(|e| StepError::Pgm(PgmError::Dynamics(e.into())))?);
        let ke0 = 0.5 * (scenario.initial_theta_dot.transpose() * &h * &scenario.initial_theta_dot)[(0, 0)];
        let poses = crate::kinematics::fk_poses(&model, &theta_prev)
            .map_err(|e| StepError::Pgm(PgmError::Dynamics(e.into())))?;
        let g_norm = scenario.gravity.norm();
        let pe: f64 = (0..model.links.len())
            .map(|li| {
                let com = poses[li].rot * model.links[li].com + poses[li].pos;
                let height = scenario.ground.normal.dot(&com) - scenario.ground.offset;
                model.links[li].mass * g_norm * height.max(0.0)
            })
            .sum();
        (ke0 + pe).max(1.0)
    };

    // Frame 0: the initial state.
    {
        let cache = fk(&model, &theta_prev).map_err(|e| StepError::Pgm(PgmError::Dynamics(e.into())))?;
        let h = mass_matrix_from(&model, &cache);
        let thetad = scenario.initial_theta_dot.clone();
        let kinetic = 0.5 * (thetad.transpose() * &h * &thetad)[(0, 0)];
        let forces = contacts
            .force_records(&model, &cache, &DVector::zeros(contacts.weight_dim()))
            .expect("zero weights always partition");
        let tau = controller_tau(&controller_ctx, &theta_prev, &thetad, 0.0);
        record.frames.push(FrameRecord {
            t: 0.0,
            theta: theta_prev.clone(),
            theta_dot: thetad,
            kinetic,
            forces,
            tau,
            outer_iters: 0,
            proj_iters: 0,
            dt_realized_min: dt,
            status: FrameStatus::Ok,
        });
    }

    for frame in 1..=n_frames {
        let t_frame = frame as f64 * dt;
        let (form, order) = match method_form_order(scenario.method) {
            Some(fo) => fo,
            None => {
                // Baseline: one linearized step per frame.
                let world = World {
                    robot: &model,
                    gravity: scenario.gravity,
                    contacts: &contacts,
                };
                let tau = controller_tau(&controller_ctx, &theta_prev, &((&theta_prev - &theta_prev2) / dt_last), t_frame);
                let (theta, w) = baseline_mdp_step(
                    &world,
                    dt,
                    &theta_prev,
                    &theta_prev2,
                    &tau,
                    cfg.pgm.qp_tol,
                    cfg.pgm.qp_max_iter,
                )?;
                theta_prev2 = theta_prev.clone();
                theta_prev = theta;
                dt_last = dt;
                let done = push_frame(
                    &mut record,
                    &model,
                    &contacts,
                    &chart_rot,
                    t_frame,
                    &theta_prev,
                    &theta_prev2,
                    dt_last,
                    &w,
                    &controller_ctx,
                    1,
                    0,
                    dt,
                    FrameStatus::Ok,
                    e_ref,
                );
                if done {
                    return Ok(record);
                }
                continue;
            }
        };

        // NMDP frame: advance by dt_primary, splitting when the required
        // alpha would exceed alpha_max.
        let mut remaining = dt;
        let mut frame_logs: Vec<SubstepLog> = Vec::new();
        let mut last_weights = DVector::zeros(contacts.weight_dim());
        let mut recharted = false;
        // Roundoff slivers must never become their own pieces: the last
        // piece absorbs near-cap remainders, and anything below the time
        // floor is dropped (frame clocks are recomputed per frame).
        while remaining > dt * 1e-9 {
            let max_piece = cfg.alpha_max * dt_last;
            let piece = if remaining <= max_piece * (1.0 + 1e-6) {
                remaining
            } else {
                max_piece
            };
            let alpha = piece / dt_last;
            let t0 = t_frame - remaining;
            let world = World {
                robot: &model,
                gravity: scenario.gravity,
                contacts: &contacts,
            };
            let attempt = simulate_adaptive(
                &world,
                form,
                order,
                alpha,
                dt_last,
                &theta_prev,
                &theta_prev2,
                t0,
                controller_ctx.as_ref(),
                cfg,
            );
            let step = match attempt {
                Ok(step) => step,
                Err(StepError::Pgm(PgmError::SingularJacobian)) if !recharted => {
                    // Move the chart singularity away from the current
                    // configuration and retry this piece once.
                    recharted = true;
                    let reference = theta_prev.clone();
                    let mut tp = theta_prev.clone();
                    let mut tp2 = theta_prev2.clone();
                    match rechart_floating_base(&model, &reference, &mut [&mut tp, &mut tp2]) {
                        Some(new_model) => {
                            let q = euler_xyz_matrix(&Vector3::new(
                                reference[model.dof_slice(model.floating_joint().unwrap()).start + 3],
                                reference[model.dof_slice(model.floating_joint().unwrap()).start + 4],
                                reference[model.dof_slice(model.floating_joint().unwrap()).start + 5],
                            ));
                            chart_rot *= q;
                            model = new_model;
                            theta_prev = tp;
                            theta_prev2 = tp2;
                            if let Some(b) = boundary_theta.as_mut() {
                                let mut b2 = b.clone();
                                // boundary history lives in the old chart
                                rechart_in_place(&model, &q, &mut b2);
                                *b = b2;
                            }
                            continue;
                        }
                        None => {
                            return Err(StepError::AtFrame {
                                frame,
                                message: "singular Jacobian and no floating chart to move".into(),
                            })
                        }
                    }
                }
                Err(e) => {
                    return Err(StepError::AtFrame {
                        frame,
                        message: e.to_string(),
                    })
                }
            };
            remaining -= piece;
            dt_last = step.dt_last;
            theta_prev2 = step.theta_prev;
            theta_prev = step.theta;
            last_weights = step.weights;
            frame_logs.extend(step.substeps);
        }

        // Restore primary-rate history from frame boundaries after a
        // subdivided frame.
        if cfg.boundary_reset && dt_last < dt {
            if let Some(prev_boundary) = &boundary_theta {
                theta_prev2 = prev_boundary.clone();
                dt_last = dt;
            }
        }
        boundary_theta = Some(theta_prev.clone());

        let status = if frame_logs
            .iter()
            .any(|l| l.stats.status == PgmStatus::MaxIter)
        {
            FrameStatus::MaxIter
        } else {
            FrameStatus::Ok
        };
        let outer: usize = frame_logs.iter().map(|l| l.stats.outer_iterations).sum();
        let proj: usize = frame_logs
            .iter()
            .map(|l| l.stats.total_projection_iterations())
            .sum();
        let min_dt = frame_logs
            .iter()
            .map(|l| l.advance)
            .fold(f64::INFINITY, f64::min);
        for log in frame_logs {
            record.solver_stats.push(log.stats);
        }
        let done = push_frame(
            &mut record,
            &model,
            &contacts,
            &chart_rot,
            t_frame,
            &theta_prev,
            &theta_prev2,
            dt_last,
            &last_weights,
            &controller_ctx,
            outer,
            proj,
            min_dt,
            status,
            e_ref,
        );
        if done {
            return Ok(record);
        }
    }
    Ok(record)
}

fn rechart_in_place(model: &RobotModel, q: &Matrix3<f64>, theta: &mut DVector<f64>) {
    if let Some(fj) = model.floating_joint() {
        let slice = model.dof_slice(fj);
        let rot_ofs = slice.start + 3;
        let t = Vector3::new(theta[slice.start], theta[slice.start + 1], theta[slice.start + 2]);
        let t_new = q.transpose() * t;
        let r_old = euler_xyz_matrix(&Vector3::new(
            theta[rot_ofs],
            theta[rot_ofs + 1],
            theta[rot_ofs + 2],
        ));
        let r_new = euler_xyz_angles(&(q.transpose() * r_old));
        theta[slice.start] = t_new.x;
        theta[slice.start + 1] = t_new.y;
        theta[slice.start + 2] = t_new.z;
        theta[rot_ofs] = r_new.x;
        theta[rot_ofs + 1] = r_new.y;
        theta[rot_ofs + 2] = r_new.z;
    }
}

fn controller_tau(
    ctx: &Option<ControllerContext>,
    theta: &DVector<f64>,
    theta_dot: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    match ctx {
        Some(c) => {
            let target = c.spec.reference_at(t);
            let (tau, _, _) = stable_pd(theta, theta_dot, &target, &c.spec.kp, &c.spec.kd);
            tau
        }
        None => DVector::zeros(theta.len()),
    }
}

/// Append one frame; returns true when the run should stop (divergence).
#[allow(clippy::too_many_arguments)]
fn push_frame(
    record: &mut TrajectoryRecord,
    model: &RobotModel,
    contacts: &ContactSet,
    chart_rot: &Matrix3<f64>,
    t: f64,
    theta: &DVector<f64>,
    theta_prev_sub: &DVector<f64>,
    dt_last: f64,
    weights: &DVector<f64>,
    controller: &Option<ControllerContext>,
    outer_iters: usize,
    proj_iters: usize,
    dt_realized_min: f64,
    status: FrameStatus,
    e_ref: f64,
) -> bool {
    let thetad = (theta - theta_prev_sub) / dt_last;
    let finite = theta.iter().chain(thetad.iter()).all(|v| v.is_finite());
    let (kinetic, forces, tau) = if finite {
        let cache = fk(model, theta).expect("finite configuration");
        let h = mass_matrix_from(model, &cache);
        let kinetic = 0.5 * (thetad.transpose() * &h * &thetad)[(0, 0)];
        let forces = contacts
            .force_records(model, &cache, weights)
            .expect("weights partition");
        let tau = controller_tau(controller, theta, &thetad, t);
        (kinetic, forces, tau)
    } else {
        (
            f64::NAN,
            Vec::new(),
            DVector::from_element(theta.len(), f64::NAN),
        )
    };

    let diverged = !finite || !kinetic.is_finite() || kinetic > 1e6 * e_ref;
    let status = if diverged { FrameStatus::Diverged } else { status };

    // Report in the original chart even if the run re-charted mid-way.
    let theta_out = unchart_theta(model, chart_rot, theta);
    let thetad_out = if (chart_rot - Matrix3::identity()).norm() == 0.0 {
        thetad
    } else {
        // Finite-difference velocity in the original chart.
        let prev_out = unchart_theta(model, chart_rot, theta_prev_sub);
        (&theta_out - prev_out) / dt_last
    };

    record.frames.push(FrameRecord {
        t,
        theta: theta_out,
        theta_dot: thetad_out,
        kinetic,
        forces,
        tau,
        outer_iters,
        proj_iters,
        dt_realized_min,
        status,
    });
    if diverged {
        record.diverged = true;
    }
    diverged
}

/// Convenience wrapper used by tests: project a single state onto the
/// manifold with this stepper's config.
pub fn project_state(
    form: Formulation,
    order: GradientOrder,
    world: &World,
    s: &StateTriple,
    w: &DVector<f64>,
    cfg: &StepperConfig,
) -> Result<(DVector<f64>, crate::pgm::ProjStats), PgmError> {
    manifold_project(form, order, world, s, w, None, &cfg.pgm)
}

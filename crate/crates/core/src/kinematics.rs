//! Forward kinematics and derivative tensors.
//!
//! Every link pose is an affine map `X(x, theta) = R(theta) x + t(theta)`.
//! [`fk`] evaluates `R`, `t` and their first and second partial derivatives
//! with respect to all generalized coordinates by chain rule through the
//! joint tree. Third derivatives never appear in full: the dynamics only
//! needs them contracted against a velocity vector, which
//! [`fk_directionals`] propagates directly.
//!
//! Derivative tensors are stored dense (model sizes stay small); loops only
//! touch each link's ancestor coordinates.

use crate::robot_model::{JointType, RobotModel};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("configuration must be finite and have length {expected}, got length {got}")]
    BadConfiguration { expected: usize, got: usize },
    #[error("unknown link index {0}")]
    UnknownLink(usize),
}

/// World pose of one link with derivative tensors.
///
/// `ddrot`/`ddpos` are indexed `(a, b) -> a * n + b` and symmetric in
/// `(a, b)`; `n` is the model dof count.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPose {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
    pub drot: Vec<Matrix3<f64>>,
    pub dpos: Vec<Vector3<f64>>,
    pub ddrot: Vec<Matrix3<f64>>,
    pub ddpos: Vec<Vector3<f64>>,
}

impl LinkPose {
    fn zeros(n: usize) -> Self {
        LinkPose {
            rot: Matrix3::identity(),
            pos: Vector3::zeros(),
            drot: vec![Matrix3::zeros(); n],
            dpos: vec![Vector3::zeros(); n],
            ddrot: vec![Matrix3::zeros(); n * n],
            ddpos: vec![Vector3::zeros(); n * n],
        }
    }

    #[inline]
    pub fn ddrot_at(&self, a: usize, b: usize, n: usize) -> &Matrix3<f64> {
        &self.ddrot[a * n + b]
    }

    #[inline]
    pub fn ddpos_at(&self, a: usize, b: usize, n: usize) -> &Vector3<f64> {
        &self.ddpos[a * n + b]
    }

    /// World position of a link-frame point.
    pub fn point(&self, x_local: &Vector3<f64>) -> Vector3<f64> {
        self.rot * x_local + self.pos
    }
}

/// All link poses at one configuration. Immutable once built; rebuilt from
/// scratch whenever the configuration changes, so it can never go stale.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicCache {
    pub theta: DVector<f64>,
    pub poses: Vec<LinkPose>,
    pub dof_count: usize,
    /// Coordinates each link actually depends on, ascending.
    active: Vec<Vec<usize>>,
}

impl KinematicCache {
    pub fn active_dofs(&self, link: usize) -> &[usize] {
        &self.active[link]
    }
}

/// Pose without derivatives, for history configurations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseOnly {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
}

fn check_config(model: &RobotModel, theta: &DVector<f64>) -> Result<(), KinematicsError> {
    if theta.len() != model.dof_count() || theta.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::BadConfiguration {
            expected: model.dof_count(),
            got: theta.len(),
        });
    }
    Ok(())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Elementary rotation about coordinate axis `axis` and its angle derivatives
/// up to order 3.
fn elem_rot_derivs(axis: usize, q: f64) -> [Matrix3<f64>; 4] {
    let unit = match axis {
        0 => Vector3::x(),
        1 => Vector3::y(),
        _ => Vector3::z(),
    };
    axis_angle_derivs(&unit, q)
}

/// Rotation about a unit axis by `q` and its derivatives up to order 3:
/// `R = I + sin(q) K + (1 - cos(q)) K^2` with `K = skew(axis)`.
fn axis_angle_derivs(axis: &Vector3<f64>, q: f64) -> [Matrix3<f64>; 4] {
    let k = skew(axis);
    let k2 = k * k;
    let (s, c) = q.sin_cos();
    [
        Matrix3::identity() + k * s + k2 * (1.0 - c),
        k * c + k2 * s,
        k * (-s) + k2 * c,
        k * (-c) + k2 * (-s),
    ]
}

/// Local transform of one joint: value plus derivatives indexed by position
/// within the joint's dof slice. Translation parts are affine, so only first
/// translation derivatives are ever nonzero.
struct JointLocal {
    rot: Matrix3<f64>,
    pos: Vector3<f64>,
    drot: Vec<Matrix3<f64>>,
    dpos: Vec<Vector3<f64>>,
    ddrot: Vec<Matrix3<f64>>,
    dddrot: Vec<Matrix3<f64>>,
}

impl JointLocal {
    #[inline]
    fn ddrot_at(&self, a: usize, b: usize) -> &Matrix3<f64> {
        &self.ddrot[a * self.drot.len() + b]
    }

    #[inline]
    fn dddrot_at(&self, a: usize, b: usize, c: usize) -> &Matrix3<f64> {
        let sd = self.drot.len();
        &self.dddrot[(a * sd + b) * sd + c]
    }
}

fn joint_local(model: &RobotModel, joint: usize, theta: &DVector<f64>, thirds: bool) -> JointLocal {
    let spec = &model.joints[joint];
    let slice = model.dof_slice(joint);
    let sd = slice.len();
    let mut out = JointLocal {
        rot: Matrix3::identity(),
        pos: Vector3::zeros(),
        drot: vec![Matrix3::zeros(); sd],
        dpos: vec![Vector3::zeros(); sd],
        ddrot: vec![Matrix3::zeros(); sd * sd],
        dddrot: if thirds {
            vec![Matrix3::zeros(); sd * sd * sd]
        } else {
            Vec::new()
        },
    };
    match spec.joint_type {
        JointType::Fixed => {}
        JointType::HingeEuler => {
            let axis = spec.axis.expect("validated hinge axis");
            let d = axis_angle_derivs(&axis, theta[slice.start]);
            out.rot = d[0];
            out.drot[0] = d[1];
            out.ddrot[0] = d[2];
            if thirds {
                out.dddrot[0] = d[3];
            }
        }
        JointType::BallEuler => {
            fill_euler(&mut out, theta, slice.start, 0, thirds);
        }
        JointType::FloatingBase => {
            // Slice layout: (tx, ty, tz, rx, ry, rz).
            out.pos = Vector3::new(
                theta[slice.start],
                theta[slice.start + 1],
                theta[slice.start + 2],
            );
            out.dpos[0] = Vector3::x();
            out.dpos[1] = Vector3::y();
            out.dpos[2] = Vector3::z();
            fill_euler(&mut out, theta, slice.start + 3, 3, thirds);
        }
    }
    out
}

/// Fill Euler-angle rotation derivatives into slice positions
/// `base..base + 3`. Mixed partials of `Rx(a) Ry(b) Rz(c)` are products of
/// per-axis derivative orders.
fn fill_euler(
    out: &mut JointLocal,
    theta: &DVector<f64>,
    dof_start: usize,
    base: usize,
    thirds: bool,
) {
    let derivs: [[Matrix3<f64>; 4]; 3] = [
        elem_rot_derivs(0, theta[dof_start]),
        elem_rot_derivs(1, theta[dof_start + 1]),
        elem_rot_derivs(2, theta[dof_start + 2]),
    ];
    let term =
        |counts: [usize; 3]| derivs[0][counts[0]] * derivs[1][counts[1]] * derivs[2][counts[2]];
    out.rot = term([0, 0, 0]);
    let sd = out.drot.len();
    for i in 0..3 {
        let mut c1 = [0usize; 3];
        c1[i] += 1;
        out.drot[base + i] = term(c1);
        for j in 0..3 {
            let mut c2 = c1;
            c2[j] += 1;
            out.ddrot[(base + i) * sd + (base + j)] = term(c2);
            if thirds {
                for k in 0..3 {
                    let mut c3 = c2;
                    c3[k] += 1;
                    out.dddrot[((base + i) * sd + (base + j)) * sd + (base + k)] = term(c3);
                }
            }
        }
    }
}

/// Forward kinematics: world pose and first/second derivative tensors of
/// every link. Pure and deterministic: identical inputs give bit-identical
/// caches.
pub fn fk(model: &RobotModel, theta: &DVector<f64>) -> Result<KinematicCache, KinematicsError> {
    check_config(model, theta)?;
    let n = model.dof_count();
    let mut poses: Vec<LinkPose> = Vec::with_capacity(model.links.len());
    let mut active: Vec<Vec<usize>> = Vec::with_capacity(model.links.len());

    let world = LinkPose::zeros(n);
    for li in 0..model.links.len() {
        let (parent_pose, parent_active): (&LinkPose, &[usize]) = match model.parent_of(li) {
            Some(p) => (&poses[p], &active[p]),
            None => (&world, &[]),
        };
        let slice = model.dof_slice(li);
        let mut act: Vec<usize> = parent_active.to_vec();
        act.extend(slice.clone());

        let local = joint_local(model, li, theta, false);
        let rf = *model.origin_rotation(li);
        let tf = model.joints[li].origin_xyz;

        // Parent pose pushed through the fixed origin transform.
        let r_pf = parent_pose.rot * rf;
        let t_pf = parent_pose.rot * tf + parent_pose.pos;

        let mut pose = LinkPose::zeros(n);
        pose.rot = r_pf * local.rot;
        pose.pos = r_pf * local.pos + t_pf;

        // First derivatives. Parent coordinates and the joint's own slice
        // are disjoint, so each term lands in exactly one branch.
        for &a in parent_active {
            let dr_pf = parent_pose.drot[a] * rf;
            let dt_pf = parent_pose.drot[a] * tf + parent_pose.dpos[a];
            pose.drot[a] = dr_pf * local.rot;
            pose.dpos[a] = dr_pf * local.pos + dt_pf;
        }
        for (s, a) in slice.clone().enumerate() {
            pose.drot[a] = r_pf * local.drot[s];
            pose.dpos[a] = r_pf * local.dpos[s];
        }

        // Second derivatives: parent x parent, parent x slice, slice x slice.
        for (ai, &a) in parent_active.iter().enumerate() {
            for &b in &parent_active[ai..] {
                let ddr_pf = parent_pose.ddrot_at(a, b, n) * rf;
                let ddt_pf = parent_pose.ddrot_at(a, b, n) * tf + parent_pose.ddpos_at(a, b, n);
                let ddr = ddr_pf * local.rot;
                let ddt = ddr_pf * local.pos + ddt_pf;
                pose.ddrot[a * n + b] = ddr;
                pose.ddrot[b * n + a] = ddr;
                pose.ddpos[a * n + b] = ddt;
                pose.ddpos[b * n + a] = ddt;
            }
            let dr_pf = parent_pose.drot[a] * rf;
            for (s, b) in slice.clone().enumerate() {
                let ddr = dr_pf * local.drot[s];
                let ddt = dr_pf * local.dpos[s];
                pose.ddrot[a * n + b] = ddr;
                pose.ddrot[b * n + a] = ddr;
                pose.ddpos[a * n + b] = ddt;
                pose.ddpos[b * n + a] = ddt;
            }
        }
        for (s, a) in slice.clone().enumerate() {
            for (s2, b) in slice.clone().enumerate() {
                pose.ddrot[a * n + b] = r_pf * local.ddrot_at(s, s2);
                // Joint translations are affine in theta: no second-order
                // translation term.
            }
        }

        poses.push(pose);
        active.push(act);
    }
    Ok(KinematicCache {
        theta: theta.clone(),
        poses,
        dof_count: n,
        active,
    })
}

/// Poses only, for history configurations where no derivatives are needed.
pub fn fk_poses(model: &RobotModel, theta: &DVector<f64>) -> Result<Vec<PoseOnly>, KinematicsError> {
    check_config(model, theta)?;
    let mut out: Vec<PoseOnly> = Vec::with_capacity(model.links.len());
    for li in 0..model.links.len() {
        let (pr, pp) = match model.parent_of(li) {
            Some(p) => (out[p].rot, out[p].pos),
            None => (Matrix3::identity(), Vector3::zeros()),
        };
        let local = joint_local(model, li, theta, false);
        let r_pf = pr * model.origin_rotation(li);
        let t_pf = pr * model.joints[li].origin_xyz + pp;
        out.push(PoseOnly {
            rot: r_pf * local.rot,
            pos: r_pf * local.pos + t_pf,
        });
    }
    Ok(out)
}

/// Third derivatives of link poses contracted against a fixed vector `v`
/// (a generalized velocity in practice):
///
/// - `t1[j]    = sum_{k,l} d3R/(dθk dθl dθj) v_k v_l`
/// - `t2[j, m] = sum_k     d3R/(dθk dθj dθm) v_k` (only with `want_t2`)
///
/// `t1` is what the exact residual Jacobian needs; `t2` additionally serves
/// the kinetic-energy Hessian. By symmetry `t1[j] = sum_m t2[j, m] v_m`.
#[derive(Debug, Clone)]
pub struct DirectionalThirds {
    pub t1_rot: Vec<Matrix3<f64>>,
    pub t1_pos: Vec<Vector3<f64>>,
    /// Indexed `(j, m) -> j * n + m`; empty unless requested.
    pub t2_rot: Vec<Matrix3<f64>>,
    pub t2_pos: Vec<Vector3<f64>>,
}

impl DirectionalThirds {
    fn zeros(n: usize, want_t2: bool) -> Self {
        DirectionalThirds {
            t1_rot: vec![Matrix3::zeros(); n],
            t1_pos: vec![Vector3::zeros(); n],
            t2_rot: if want_t2 { vec![Matrix3::zeros(); n * n] } else { Vec::new() },
            t2_pos: if want_t2 { vec![Vector3::zeros(); n * n] } else { Vec::new() },
        }
    }
}

pub fn fk_directionals(
    model: &RobotModel,
    cache: &KinematicCache,
    v: &DVector<f64>,
    want_t2: bool,
) -> Vec<DirectionalThirds> {
    let n = cache.dof_count;
    assert_eq!(v.len(), n, "direction vector must match dof count");
    let mut out: Vec<DirectionalThirds> = Vec::with_capacity(model.links.len());
    let world = DirectionalThirds::zeros(n, want_t2);
    let world_pose = LinkPose::zeros(n);

    for li in 0..model.links.len() {
        let (parent_pose, parent_dir, parent_active): (&LinkPose, &DirectionalThirds, &[usize]) =
            match model.parent_of(li) {
                Some(p) => (&cache.poses[p], &out[p], cache.active_dofs(p)),
                None => (&world_pose, &world, &[]),
            };
        let slice = model.dof_slice(li);
        let act = cache.active_dofs(li);
        let local = joint_local(model, li, &cache.theta, true);
        let rf = *model.origin_rotation(li);
        let tf = model.joints[li].origin_xyz;

        // Parent quantities contracted with v, pushed through the fixed
        // origin. All "pos" variants account for t_pf = P.rot * tf + P.pos.
        let p_rot = parent_pose.rot * rf;
        let mut dv_p_rot = Matrix3::zeros();
        let mut dv_p_pos = Vector3::zeros();
        for &k in parent_active {
            dv_p_rot += parent_pose.drot[k] * v[k];
            dv_p_pos += parent_pose.dpos[k] * v[k];
        }
        let mut ddv_p_rot = vec![Matrix3::zeros(); n];
        let mut ddv_p_pos = vec![Vector3::zeros(); n];
        for &j in parent_active {
            let mut mr = Matrix3::zeros();
            let mut mp = Vector3::zeros();
            for &k in parent_active {
                mr += parent_pose.ddrot_at(k, j, n) * v[k];
                mp += parent_pose.ddpos_at(k, j, n) * v[k];
            }
            ddv_p_rot[j] = mr;
            ddv_p_pos[j] = mp;
        }
        let mut capital_dv_rot = Matrix3::zeros();
        let mut capital_dv_pos = Vector3::zeros();
        for &k in parent_active {
            capital_dv_rot += ddv_p_rot[k] * v[k];
            capital_dv_pos += ddv_p_pos[k] * v[k];
        }
        let fold_rot = |m: &Matrix3<f64>| m * rf;
        let fold_pos = |m: &Matrix3<f64>, p: &Vector3<f64>| m * tf + p;

        let dv_pf_rot = fold_rot(&dv_p_rot);
        let capital_dv_pf_rot = fold_rot(&capital_dv_rot);

        // Local joint quantities contracted with v over its own slice.
        let sd = slice.len();
        let vloc: Vec<f64> = slice.clone().map(|a| v[a]).collect();
        let mut dv_j_rot = Matrix3::zeros();
        let mut dv_j_pos = Vector3::zeros();
        for s in 0..sd {
            dv_j_rot += local.drot[s] * vloc[s];
            dv_j_pos += local.dpos[s] * vloc[s];
        }
        let mut ddv_j_rot = vec![Matrix3::zeros(); sd];
        for s2 in 0..sd {
            let mut m = Matrix3::zeros();
            for s in 0..sd {
                m += local.ddrot_at(s, s2) * vloc[s];
            }
            ddv_j_rot[s2] = m;
        }
        let mut capital_dv_j_rot = Matrix3::zeros();
        for s in 0..sd {
            capital_dv_j_rot += ddv_j_rot[s] * vloc[s];
        }
        let mut t1_j_rot = vec![Matrix3::zeros(); sd];
        let mut t2_j_rot = vec![Matrix3::zeros(); sd * sd];
        for sj in 0..sd {
            let mut m1 = Matrix3::zeros();
            for sk in 0..sd {
                let mut m2 = Matrix3::zeros();
                for sl in 0..sd {
                    m2 += local.dddrot_at(sl, sk, sj) * vloc[sl];
                }
                t2_j_rot[sk * sd + sj] = m2;
                m1 += m2 * vloc[sk];
            }
            t1_j_rot[sj] = m1;
        }

        let mut dir = DirectionalThirds::zeros(n, want_t2);

        // T1 composition: the Leibniz expansion of a twice-v-contracted
        // third derivative of Pf * J.
        for &j in act {
            let in_parent = j < slice.start && parent_active.binary_search(&j).is_ok();
            let sj = if slice.contains(&j) { Some(j - slice.start) } else { None };

            let t1_pf_rot = fold_rot(&parent_dir.t1_rot[j]);
            let t1_pf_pos = fold_pos(&parent_dir.t1_rot[j], &parent_dir.t1_pos[j]);
            let dp_rot = if in_parent { fold_rot(&parent_pose.drot[j]) } else { Matrix3::zeros() };
            let ddvp_rot = fold_rot(&ddv_p_rot[j]);
            let dq_rot = sj.map_or(Matrix3::zeros(), |s| local.drot[s]);
            let dq_pos = sj.map_or(Vector3::zeros(), |s| local.dpos[s]);
            let ddvq_rot = sj.map_or(Matrix3::zeros(), |s| ddv_j_rot[s]);
            let t1q_rot = sj.map_or(Matrix3::zeros(), |s| t1_j_rot[s]);

            dir.t1_rot[j] = t1_pf_rot * local.rot
                + capital_dv_pf_rot * dq_rot
                + (ddvp_rot * dv_j_rot) * 2.0
                + (dv_pf_rot * ddvq_rot) * 2.0
                + dp_rot * capital_dv_j_rot
                + p_rot * t1q_rot;
            dir.t1_pos[j] = t1_pf_rot * local.pos
                + capital_dv_pf_rot * dq_pos
                + (ddvp_rot * dv_j_pos) * 2.0
                + t1_pf_pos;
        }

        if want_t2 {
            for &j in act {
                let j_in_parent = j < slice.start && parent_active.binary_search(&j).is_ok();
                let sj = if slice.contains(&j) { Some(j - slice.start) } else { None };
                let dpj_rot =
                    if j_in_parent { fold_rot(&parent_pose.drot[j]) } else { Matrix3::zeros() };
                let ddvpj_rot = fold_rot(&ddv_p_rot[j]);
                let dqj_rot = sj.map_or(Matrix3::zeros(), |s| local.drot[s]);
                let dqj_pos = sj.map_or(Vector3::zeros(), |s| local.dpos[s]);
                let ddvqj_rot = sj.map_or(Matrix3::zeros(), |s| ddv_j_rot[s]);
                for &m in act {
                    let m_in_parent = m < slice.start && parent_active.binary_search(&m).is_ok();
                    let sm = if slice.contains(&m) { Some(m - slice.start) } else { None };
                    let t2_pf_rot = fold_rot(&parent_dir.t2_rot[j * n + m]);
                    let t2_pf_pos =
                        fold_pos(&parent_dir.t2_rot[j * n + m], &parent_dir.t2_pos[j * n + m]);
                    let ddp_rot = if j_in_parent && m_in_parent {
                        fold_rot(parent_pose.ddrot_at(j, m, n))
                    } else {
                        Matrix3::zeros()
                    };
                    let dpm_rot =
                        if m_in_parent { fold_rot(&parent_pose.drot[m]) } else { Matrix3::zeros() };
                    let ddvpm_rot = fold_rot(&ddv_p_rot[m]);
                    let dqm_rot = sm.map_or(Matrix3::zeros(), |s| local.drot[s]);
                    let dqm_pos = sm.map_or(Vector3::zeros(), |s| local.dpos[s]);
                    let ddvqm_rot = sm.map_or(Matrix3::zeros(), |s| ddv_j_rot[s]);
                    let ddq_rot = match (sj, sm) {
                        (Some(a), Some(b)) => *local.ddrot_at(a, b),
                        _ => Matrix3::zeros(),
                    };
                    let t2q_rot = match (sj, sm) {
                        (Some(a), Some(b)) => t2_j_rot[a * sd + b],
                        _ => Matrix3::zeros(),
                    };

                    dir.t2_rot[j * n + m] = t2_pf_rot * local.rot
                        + ddvpj_rot * dqm_rot
                        + ddvpm_rot * dqj_rot
                        + ddp_rot * dv_j_rot
                        + dv_pf_rot * ddq_rot
                        + dpj_rot * ddvqm_rot
                        + dpm_rot * ddvqj_rot
                        + p_rot * t2q_rot;
                    dir.t2_pos[j * n + m] = t2_pf_rot * local.pos
                        + ddvpj_rot * dqm_pos
                        + ddvpm_rot * dqj_pos
                        + ddp_rot * dv_j_pos
                        + t2_pf_pos;
                }
            }
        }

        out.push(dir);
    }
    out
}

/// `dX/dtheta` at a link point: column `a` is `drot[a] * x + dpos[a]`.
pub fn point_jacobian(
    cache: &KinematicCache,
    link: usize,
    x_local: &Vector3<f64>,
) -> Result<DMatrix<f64>, KinematicsError> {
    let pose = cache.poses.get(link).ok_or(KinematicsError::UnknownLink(link))?;
    let n = cache.dof_count;
    let mut jac = DMatrix::zeros(3, n);
    for &a in cache.active_dofs(link) {
        let col = pose.drot[a] * x_local + pose.dpos[a];
        jac.column_mut(a).copy_from(&col);
    }
    Ok(jac)
}

/// `d2X/dtheta2` at a link point, symmetric in the two coordinate indices.
#[derive(Debug, Clone)]
pub struct PointHessian {
    n: usize,
    data: Vec<Vector3<f64>>,
}

impl PointHessian {
    #[inline]
    pub fn at(&self, a: usize, b: usize) -> &Vector3<f64> {
        &self.data[a * self.n + b]
    }

    pub fn dof_count(&self) -> usize {
        self.n
    }
}

pub fn point_hessian(
    cache: &KinematicCache,
    link: usize,
    x_local: &Vector3<f64>,
) -> Result<PointHessian, KinematicsError> {
    let pose = cache.poses.get(link).ok_or(KinematicsError::UnknownLink(link))?;
    let n = cache.dof_count;
    let mut data = vec![Vector3::zeros(); n * n];
    for &a in cache.active_dofs(link) {
        for &b in cache.active_dofs(link) {
            data[a * n + b] = pose.ddrot_at(a, b, n) * x_local + pose.ddpos_at(a, b, n);
        }
    }
    Ok(PointHessian { n, data })
}

/// Mass-density body integrals of pose differences, closed over the moment
/// triples:
///
/// - scalar: `integral rho |X_a - X_b|^2 dx`
/// - vector: `integral rho (dX_a/dtheta)^T (X_a - X_b) dx`
///
/// Both caches must come from the same model.
pub fn weighted_body_integral(
    model: &RobotModel,
    cache_a: &KinematicCache,
    cache_b: &KinematicCache,
) -> (f64, DVector<f64>) {
    let n = cache_a.dof_count;
    let mut scalar = 0.0;
    let mut vector = DVector::zeros(n);
    for li in 0..model.links.len() {
        let mom = model.moments(li);
        let a = &cache_a.poses[li];
        let b = &cache_b.poses[li];
        let dr = a.rot - b.rot;
        let dp = a.pos - b.pos;
        let dr_s = dr * mom.second;
        scalar += dr_s.dot(&dr) + 2.0 * dp.dot(&(dr * mom.first)) + mom.mass * dp.norm_squared();
        for &k in cache_a.active_dofs(li) {
            vector[k] += a.drot[k].dot(&dr_s)
                + dp.dot(&(a.drot[k] * mom.first))
                + a.dpos[k].dot(&(dr * mom.first))
                + mom.mass * a.dpos[k].dot(&dp);
        }
    }
    (scalar, vector)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_model::{JointSpec, LinkSpec, ParentRef, RobotModel};

    fn pendulum_about(axis: Vector3<f64>, com: Vector3<f64>) -> RobotModel {
        let inertia = (Matrix3::identity() * com.norm_squared() - com * com.transpose()) * 1.0;
        RobotModel::new(
            vec![LinkSpec {
                name: "bob".into(),
                mass: 1.0,
                com,
                inertia,
                contact_points: vec![],
            }],
            vec![JointSpec {
                parent: ParentRef::World,
                joint_type: JointType::HingeEuler,
                axis: Some(axis),
                origin_xyz: Vector3::zeros(),
                origin_rpy: Vector3::zeros(),
            }],
        )
        .unwrap()
    }

    fn floating_box() -> RobotModel {
        RobotModel::new(
            vec![LinkSpec {
                name: "base".into(),
                mass: 2.0,
                com: Vector3::new(0.05, -0.02, 0.01),
                inertia: Matrix3::from_diagonal(&Vector3::new(0.4, 0.5, 0.3)),
                contact_points: vec![],
            }],
            vec![JointSpec {
                parent: ParentRef::World,
                joint_type: JointType::FloatingBase,
                axis: None,
                origin_xyz: Vector3::zeros(),
                origin_rpy: Vector3::zeros(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn pendulum_at_zero_is_identity() {
        let model = pendulum_about(Vector3::z(), Vector3::new(0.0, 0.0, -1.0));
        let cache = fk(&model, &DVector::zeros(1)).unwrap();
        assert!((cache.poses[0].rot - Matrix3::identity()).norm() < 1e-15);
        assert!(cache.poses[0].pos.norm() < 1e-15);
    }

    #[test]
    fn pendulum_about_z_quarter_turn() {
        let model = pendulum_about(Vector3::z(), Vector3::new(1.0, 0.0, 0.0));
        let cache = fk(&model, &DVector::from_element(1, std::f64::consts::FRAC_PI_2)).unwrap();
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((cache.poses[0].rot - expect).norm() < 1e-12);
    }

    #[test]
    fn rotation_stays_orthonormal() {
        let model = floating_box();
        let theta = DVector::from_vec(vec![0.2, -0.4, 1.3, 0.7, -1.1, 2.4]);
        let cache = fk(&model, &theta).unwrap();
        let r = cache.poses[0].rot;
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn fk_rejects_non_finite() {
        let model = floating_box();
        let mut theta = DVector::zeros(6);
        theta[2] = f64::NAN;
        assert!(fk(&model, &theta).is_err());
    }

    #[test]
    fn fk_is_bit_deterministic() {
        let model = floating_box();
        let theta = DVector::from_vec(vec![0.2, -0.4, 1.3, 0.7, -1.1, 2.4]);
        assert_eq!(fk(&model, &theta).unwrap(), fk(&model, &theta).unwrap());
    }

    #[test]
    fn fixed_link_has_zero_jacobian() {
        let model = RobotModel::new(
            vec![LinkSpec {
                name: "anchor".into(),
                mass: 1.0,
                com: Vector3::zeros(),
                inertia: Matrix3::identity(),
                contact_points: vec![],
            }],
            vec![JointSpec {
                parent: ParentRef::World,
                joint_type: JointType::Fixed,
                axis: None,
                origin_xyz: Vector3::new(1.0, 2.0, 3.0),
                origin_rpy: Vector3::zeros(),
            }],
        )
        .unwrap();
        let cache = fk(&model, &DVector::zeros(0)).unwrap();
        let jac = point_jacobian(&cache, 0, &Vector3::new(0.3, 0.0, 0.0)).unwrap();
        assert_eq!(jac.ncols(), 0);
        let hess = point_hessian(&cache, 0, &Vector3::new(0.3, 0.0, 0.0)).unwrap();
        assert_eq!(hess.dof_count(), 0);
    }

    #[test]
    fn pendulum_bob_lever_arm() {
        // z-axis hinge, bob at unit x offset, theta = 0: the Jacobian column
        // is the tangent of the unit circle, (0, 1, 0).
        let model = pendulum_about(Vector3::z(), Vector3::new(1.0, 0.0, 0.0));
        let cache = fk(&model, &DVector::zeros(1)).unwrap();
        let jac = point_jacobian(&cache, 0, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((jac.column(0) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn pendulum_hessian_is_circular_acceleration() {
        // For a unit hinge, d2X/dtheta2 = -(X - pivot): circular motion.
        let model = pendulum_about(Vector3::z(), Vector3::new(1.0, 0.0, 0.0));
        let theta = DVector::from_element(1, 0.77);
        let cache = fk(&model, &theta).unwrap();
        let x_local = Vector3::new(1.0, 0.0, 0.0);
        let hess = point_hessian(&cache, 0, &x_local).unwrap();
        let world = cache.poses[0].point(&x_local);
        assert!((hess.at(0, 0) + world).norm() < 1e-13);
    }

    #[test]
    fn point_hessian_symmetric() {
        let model = floating_box();
        let theta = DVector::from_vec(vec![0.2, -0.4, 1.3, 0.7, -1.1, 2.4]);
        let cache = fk(&model, &theta).unwrap();
        let hess = point_hessian(&cache, 0, &Vector3::new(0.1, 0.2, -0.3)).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert!((hess.at(a, b) - hess.at(b, a)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn weighted_integral_of_identical_poses_is_zero() {
        let model = floating_box();
        let theta = DVector::from_vec(vec![0.2, -0.4, 1.3, 0.7, -1.1, 2.4]);
        let cache = fk(&model, &theta).unwrap();
        let (s, v) = weighted_body_integral(&model, &cache, &cache);
        assert_eq!(s, 0.0);
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn weighted_integral_of_rigid_translation() {
        let model = floating_box();
        let a = DVector::from_vec(vec![0.2, -0.4, 1.3, 0.0, 0.0, 0.0]);
        let mut b = a.clone();
        b[0] += 0.3;
        b[1] -= 0.1;
        b[2] += 0.7;
        let d = Vector3::new(0.3, -0.1, 0.7);
        let ca = fk(&model, &a).unwrap();
        let cb = fk(&model, &b).unwrap();
        let (s, _) = weighted_body_integral(&model, &ca, &cb);
        let expect: f64 = 2.0 * d.norm_squared();
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn fk_poses_agree_with_fk() {
        let model = floating_box();
        let theta = DVector::from_vec(vec![0.2, -0.4, 1.3, 0.7, -1.1, 2.4]);
        let cache = fk(&model, &theta).unwrap();
        let poses = fk_poses(&model, &theta).unwrap();
        assert!((cache.poses[0].rot - poses[0].rot).norm() < 1e-15);
        assert!((cache.poses[0].pos - poses[0].pos).norm() < 1e-15);
    }
}

//! Shared test oracles and model builders.
//!
//! Everything here is independent of the library's production paths: finite
//! differences, Monte-Carlo body integrals, and hand-assembled models with
//! known geometry.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use nmdp_core::robot_model::{
    ContactModelParams, GroundPlane, JointSpec, JointType, LinkSpec, ParentRef, RobotModel,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize, amp: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.random_range(-amp..amp))
}

/// Max-abs relative error of `a` against reference `b`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

/// Central finite-difference Jacobian of a vector function.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, n);
    for k in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.column_mut(k).copy_from(&col);
    }
    jac
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    DVector::from_fn(n, |k, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

// ---------------------------------------------------------------------------
// Box-shaped links with known geometry (for Monte-Carlo oracles)
// ---------------------------------------------------------------------------

/// Uniform solid box: geometry the Monte-Carlo sampler can reproduce.
#[derive(Debug, Clone, Copy)]
pub struct BoxGeom {
    pub center: Vector3<f64>,
    pub half: Vector3<f64>,
    pub mass: f64,
}

impl BoxGeom {
    pub fn sample(&self, r: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(
            self.center.x + r.random_range(-self.half.x..self.half.x),
            self.center.y + r.random_range(-self.half.y..self.half.y),
            self.center.z + r.random_range(-self.half.z..self.half.z),
        )
    }
}

/// Link spec for a solid box of mass `mass` centered at `center` (link
/// frame) with half-extents `half`.
pub fn box_link(
    name: &str,
    mass: f64,
    center: Vector3<f64>,
    half: Vector3<f64>,
    contact_points: Vec<Vector3<f64>>,
) -> (LinkSpec, BoxGeom) {
    let i_com = Matrix3::from_diagonal(&Vector3::new(
        mass * (half.y * half.y + half.z * half.z) / 3.0,
        mass * (half.x * half.x + half.z * half.z) / 3.0,
        mass * (half.x * half.x + half.y * half.y) / 3.0,
    ));
    let shift = (Matrix3::identity() * center.norm_squared() - center * center.transpose()) * mass;
    (
        LinkSpec {
            name: name.into(),
            mass,
            com: center,
            inertia: i_com + shift,
            contact_points,
        },
        BoxGeom {
            center,
            half,
            mass,
        },
    )
}

fn hinge(parent: ParentRef, axis: Vector3<f64>, origin_xyz: Vector3<f64>) -> JointSpec {
    JointSpec {
        parent,
        joint_type: JointType::HingeEuler,
        axis: Some(axis),
        origin_xyz,
        origin_rpy: Vector3::zeros(),
    }
}

fn floating(origin_xyz: Vector3<f64>) -> JointSpec {
    JointSpec {
        parent: ParentRef::World,
        joint_type: JointType::FloatingBase,
        axis: None,
        origin_xyz,
        origin_rpy: Vector3::zeros(),
    }
}

// ---------------------------------------------------------------------------
// Standard test models
// ---------------------------------------------------------------------------

/// Point-mass pendulum: hinge about y at the origin, bob at (0, 0, -1).
/// Gravity torque is `m g L sin(theta)` measured from hanging down.
pub fn pendulum() -> RobotModel {
    let com = Vector3::new(0.0, 0.0, -1.0);
    RobotModel::new(
        vec![LinkSpec {
            name: "bob".into(),
            mass: 1.0,
            com,
            inertia: Matrix3::identity() * com.norm_squared() - com * com.transpose(),
            contact_points: vec![],
        }],
        vec![hinge(ParentRef::World, Vector3::y(), Vector3::zeros())],
    )
    .unwrap()
}

/// Two thin rods hanging from y-axis hinges; box geometry for MC oracles.
pub fn double_pendulum() -> (RobotModel, Vec<BoxGeom>) {
    let (upper, g1) = box_link(
        "upper",
        1.0,
        Vector3::new(0.0, 0.0, -0.5),
        Vector3::new(0.02, 0.02, 0.5),
        vec![],
    );
    let (lower, g2) = box_link(
        "lower",
        0.7,
        Vector3::new(0.0, 0.0, -0.45),
        Vector3::new(0.02, 0.02, 0.45),
        vec![],
    );
    let model = RobotModel::new(
        vec![upper, lower],
        vec![
            hinge(ParentRef::World, Vector3::y(), Vector3::zeros()),
            hinge(
                ParentRef::Link("upper".into()),
                Vector3::y(),
                Vector3::new(0.0, 0.0, -1.0),
            ),
        ],
    )
    .unwrap();
    (model, vec![g1, g2])
}

/// Free-floating box (6 dof) with all eight corners declared as contacts.
pub fn box6() -> (RobotModel, BoxGeom) {
    let half = Vector3::new(0.15, 0.1, 0.08);
    let mut corners = Vec::new();
    for &sx in &[-1.0, 1.0] {
        for &sy in &[-1.0, 1.0] {
            for &sz in &[-1.0, 1.0] {
                corners.push(Vector3::new(sx * half.x, sy * half.y, sz * half.z));
            }
        }
    }
    let (link, geom) = box_link("box", 1.0, Vector3::zeros(), half, corners);
    let model = RobotModel::new(vec![link], vec![floating(Vector3::zeros())]).unwrap();
    (model, geom)
}

/// 12-dof quadruped: floating torso, four single-hinge legs with foot
/// contacts, pitch-hinge neck and tail. Stands with torso origin 0.27 m
/// above flat ground.
pub fn quadruped() -> RobotModel {
    let (torso, _) = box_link(
        "torso",
        4.0,
        Vector3::zeros(),
        Vector3::new(0.2, 0.12, 0.05),
        vec![],
    );
    let mut links = vec![torso];
    let mut joints = vec![floating(Vector3::zeros())];
    let hips = [
        ("leg_fl", Vector3::new(0.18, 0.10, -0.05)),
        ("leg_fr", Vector3::new(0.18, -0.10, -0.05)),
        ("leg_rl", Vector3::new(-0.18, 0.10, -0.05)),
        ("leg_rr", Vector3::new(-0.18, -0.10, -0.05)),
    ];
    for (name, hip) in hips {
        let (leg, _) = box_link(
            name,
            0.4,
            Vector3::new(0.0, 0.0, -0.11),
            Vector3::new(0.012, 0.012, 0.11),
            vec![Vector3::new(0.0, 0.0, -0.22)],
        );
        links.push(leg);
        joints.push(hinge(ParentRef::Link("torso".into()), Vector3::y(), hip));
    }
    let (head, _) = box_link(
        "head",
        0.3,
        Vector3::new(0.05, 0.0, 0.0),
        Vector3::new(0.05, 0.02, 0.02),
        vec![],
    );
    links.push(head);
    joints.push(hinge(
        ParentRef::Link("torso".into()),
        Vector3::y(),
        Vector3::new(0.2, 0.0, 0.02),
    ));
    let (tail, _) = box_link(
        "tail",
        0.3,
        Vector3::new(-0.05, 0.0, 0.0),
        Vector3::new(0.05, 0.02, 0.02),
        vec![],
    );
    links.push(tail);
    joints.push(hinge(
        ParentRef::Link("torso".into()),
        Vector3::y(),
        Vector3::new(-0.2, 0.0, 0.02),
    ));
    RobotModel::new(links, joints).unwrap()
}

/// Free-floating small solid sphere: a "point mass" with enough rotational
/// inertia to keep the mass matrix nonsingular.
pub fn ball(mass: f64, radius: f64) -> RobotModel {
    let i = 0.4 * mass * radius * radius;
    RobotModel::new(
        vec![LinkSpec {
            name: "ball".into(),
            mass,
            com: Vector3::zeros(),
            inertia: Matrix3::identity() * i,
            contact_points: vec![Vector3::zeros()],
        }],
        vec![floating(Vector3::zeros())],
    )
    .unwrap()
}

pub fn flat_ground() -> GroundPlane {
    GroundPlane {
        normal: Vector3::z(),
        offset: 0.0,
    }
}

/// Stiffness such that one contact carrying `share` of the robot weight
/// penetrates `d0` at twice the needed force (keeps weights interior).
pub fn stiffness_for(weight: f64, contacts: usize, d0: f64) -> f64 {
    2.0 * weight / (contacts as f64) / (d0 * d0 * d0)
}

pub fn contact_params(stiffness: f64) -> ContactModelParams {
    ContactModelParams {
        mu: 0.7,
        tangents: 4,
        stiffness,
        zeta: 1e-12,
    }
}

// ---------------------------------------------------------------------------
// Scenario builders
// ---------------------------------------------------------------------------

use nmdp_core::robot_model::{Method, ScenarioSpec};

/// Free box dropped from 5 cm above flat ground; stiffness sized for ~1 mm
/// working penetration.
pub fn box_drop_scenario(method: Method, dt: f64, duration: f64) -> ScenarioSpec {
    let (model, _) = box6();
    let weight = model.total_mass() * 9.81;
    let stiffness = stiffness_for(weight, 4, 1e-3);
    let n = model.dof_count();
    let mut initial_theta = DVector::zeros(n);
    initial_theta[2] = 0.13; // bottom face 5 cm above the plane
    ScenarioSpec {
        robot: model,
        gravity: Vector3::new(0.0, 0.0, -9.81),
        ground: flat_ground(),
        dt_primary: dt,
        duration,
        method,
        contact: contact_params(stiffness),
        controller: None,
        initial_theta,
        initial_theta_dot: DVector::zeros(n),
    }
}

/// Box already resting at its equilibrium penetration.
pub fn resting_box_scenario(method: Method, dt: f64, duration: f64) -> ScenarioSpec {
    let mut scenario = box_drop_scenario(method, dt, duration);
    scenario.initial_theta[2] = 0.08 - 1e-3;
    scenario
}

/// Quadruped dropped from 2 cm above its standing height, joints held at
/// the standing pose by a stable PD controller (the base stays unactuated).
pub fn quadruped_drop_scenario(method: Method, dt: f64, duration: f64) -> ScenarioSpec {
    use nmdp_core::robot_model::{ControllerSpec, ReferenceKnot};
    let model = quadruped();
    let weight = model.total_mass() * 9.81;
    // A 2 mm working depth keeps the contact soft enough for the explicit
    // baseline to have a small stable range and for the zeroth-order
    // solver's halving recursion to stay within its depth budget at 50 ms.
    let stiffness = stiffness_for(weight, 4, 2e-3);
    let n = model.dof_count();
    let mut initial_theta = DVector::zeros(n);
    initial_theta[2] = 0.29; // standing height is 0.27
    // Gains sized so the explicit baseline keeps a small stable range
    // (5 ms) while the implicit solvers track at any tested step.
    let mut kp = DVector::zeros(n);
    let mut kd = DVector::zeros(n);
    for i in 6..n {
        kp[i] = 4.0;
        kd[i] = 0.4;
    }
    ScenarioSpec {
        robot: model,
        gravity: Vector3::new(0.0, 0.0, -9.81),
        ground: flat_ground(),
        dt_primary: dt,
        duration,
        method,
        contact: contact_params(stiffness),
        controller: Some(ControllerSpec {
            kp,
            kd,
            reference: vec![ReferenceKnot {
                t: 0.0,
                theta: DVector::zeros(n),
            }],
        }),
        initial_theta,
        initial_theta_dot: DVector::zeros(n),
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo body integrals
// ---------------------------------------------------------------------------

/// MC estimate of `integral rho |X_a - X_b|^2 dx` over box links.
pub fn mc_pose_difference(
    geoms: &[BoxGeom],
    poses_a: &[(Matrix3<f64>, Vector3<f64>)],
    poses_b: &[(Matrix3<f64>, Vector3<f64>)],
    samples: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let mut total = 0.0;
    for (li, geom) in geoms.iter().enumerate() {
        let (ra, ta) = poses_a[li];
        let (rb, tb) = poses_b[li];
        let mut acc = 0.0;
        for _ in 0..samples {
            let x = geom.sample(&mut r);
            acc += ((ra * x + ta) - (rb * x + tb)).norm_squared();
        }
        total += geom.mass * acc / samples as f64;
    }
    total
}

/// MC estimate of the generalized mass matrix `integral rho J^T J dx`.
pub fn mc_mass_matrix(
    model: &RobotModel,
    geoms: &[BoxGeom],
    theta: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> DMatrix<f64> {
    let cache = nmdp_core::kinematics::fk(model, theta).unwrap();
    let n = model.dof_count();
    let mut r = rng(seed);
    let mut h = DMatrix::zeros(n, n);
    for (li, geom) in geoms.iter().enumerate() {
        let mut acc = DMatrix::zeros(n, n);
        for _ in 0..samples {
            let x = geom.sample(&mut r);
            let jac = nmdp_core::kinematics::point_jacobian(&cache, li, &x).unwrap();
            acc += jac.transpose() * jac;
        }
        h += acc * (geom.mass / samples as f64);
    }
    h
}

//! Robot and scenario descriptions.
//!
//! A robot is a kinematic tree of links. Joint `i` attaches link `i` to its
//! parent (another link, or the world frame), so `links` and `joints` are
//! parallel lists of equal length. Generalized coordinates are laid out in
//! joint declaration order, each joint owning a contiguous slice:
//!
//! - `fixed`: 0 dof
//! - `hinge_euler`: 1 dof, rotation angle about a unit axis in the joint frame
//! - `ball_euler`: 3 dof, XYZ Euler angles `(rx, ry, rz)`
//! - `floating_base`: 6 dof, translation `(tx, ty, tz)` then XYZ Euler angles
//!
//! All Euler parameterizations are XYZ order: `R = Rx(rx) * Ry(ry) * Rz(rz)`.
//!
//! The on-disk format is a TOML document with top-level keys `links`,
//! `joints`, `gravity`, `ground`, `contact_model`, `controller`, and
//! `simulation`. Angles are radians, SI units throughout. Per-link inertia is
//! specified about the link frame origin unless `inertia_about_com = true`,
//! in which case the parser shifts it by the parallel-axis identity. The
//! serialized form of a parsed model parses back to an identical model.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Errors from parsing or validating a robot/scenario document.
#[derive(Debug, Error)]
pub enum ModelError {
    /// Malformed document. The message carries the TOML line/field location.
    #[error("parse error: {0}")]
    Parse(String),
    /// Structurally well-formed but semantically invalid description.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ModelError {
    ModelError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

/// One rigid link: mass properties and the contact points it carries.
///
/// `inertia` is the 3x3 inertia tensor about the link frame *origin*
/// (not the center of mass).
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    pub mass: f64,
    /// Center of mass in the link frame (m).
    pub com: Vector3<f64>,
    /// Inertia tensor about the link frame origin (kg m^2).
    pub inertia: Matrix3<f64>,
    /// Declared contact points in the link frame (m).
    pub contact_points: Vec<Vector3<f64>>,
}

/// Joint kinds. Euler parameterizations keep the forward kinematics smooth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    HingeEuler,
    BallEuler,
    FloatingBase,
    Fixed,
}

impl JointType {
    pub fn dof(self) -> usize {
        match self {
            JointType::HingeEuler => 1,
            JointType::BallEuler => 3,
            JointType::FloatingBase => 6,
            JointType::Fixed => 0,
        }
    }
}

/// Attachment of a link to its parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParentRef {
    World,
    Link(String),
}

/// Joint `i` connects link `i` to `parent`. `origin` is the fixed transform
/// from the parent frame to the joint frame, stored as translation plus XYZ
/// Euler angles so documents round-trip without re-deriving angles.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub parent: ParentRef,
    pub joint_type: JointType,
    /// Unit rotation axis in the joint frame; hinge joints only.
    pub axis: Option<Vector3<f64>>,
    pub origin_xyz: Vector3<f64>,
    pub origin_rpy: Vector3<f64>,
}

/// Per-link inertial moments: everything a body integral of an affine map
/// needs. `second_moment` is the raw second moment `S = integral rho x x^T dx`,
/// recovered from the origin inertia `I` via `S = tr(I)/2 * Id - I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTriple {
    pub mass: f64,
    /// First moment `m * com` (kg m).
    pub first: Vector3<f64>,
    /// Second moment `integral rho x x^T dx` (kg m^2).
    pub second: Matrix3<f64>,
}

/// Reduce a link's mass properties to the moment triple used by all body
/// integrals. Exact: the forward map is affine in the material point, so the
/// triple closes every integral this crate evaluates.
pub fn body_moments(link: &LinkSpec) -> MomentTriple {
    let trace = link.inertia.trace();
    let second = Matrix3::identity() * (0.5 * trace) - link.inertia;
    MomentTriple {
        mass: link.mass,
        first: link.com * link.mass,
        second,
    }
}

/// A validated kinematic tree. Immutable once built; cheap to share across
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    dof_slices: Vec<Range<usize>>,
    dof_count: usize,
    /// Parent link index per link; `None` means attached to the world.
    parent_index: Vec<Option<usize>>,
    moments: Vec<MomentTriple>,
    /// Cached rotation part of each joint origin transform.
    origin_rot: Vec<Matrix3<f64>>,
}

impl RobotModel {
    /// Build and validate a model from link/joint lists.
    pub fn new(links: Vec<LinkSpec>, joints: Vec<JointSpec>) -> Result<Self, ModelError> {
        if links.is_empty() {
            return Err(invalid("links", "at least one link is required"));
        }
        if links.len() != joints.len() {
            return Err(invalid(
                "joints",
                format!(
                    "expected one joint per link ({} links, {} joints)",
                    links.len(),
                    joints.len()
                ),
            ));
        }
        for (i, link) in links.iter().enumerate() {
            if !(link.mass > 0.0) || !link.mass.is_finite() {
                return Err(invalid(
                    &format!("links[{i}].mass"),
                    format!("mass must be positive and finite, got {}", link.mass),
                ));
            }
            if links[..i].iter().any(|l| l.name == link.name) {
                return Err(invalid(
                    &format!("links[{i}].name"),
                    format!("duplicate link name `{}`", link.name),
                ));
            }
            let sym_err = (link.inertia - link.inertia.transpose()).norm();
            let scale = link.inertia.norm().max(1e-12);
            if sym_err > 1e-9 * scale {
                return Err(invalid(
                    &format!("links[{i}].inertia"),
                    "inertia tensor must be symmetric",
                ));
            }
            let eig = link.inertia.symmetric_eigenvalues();
            if eig.min() < -1e-9 * scale {
                return Err(invalid(
                    &format!("links[{i}].inertia"),
                    "inertia tensor must be positive semidefinite",
                ));
            }
            let second = body_moments(link).second;
            if second.symmetric_eigenvalues().min() < -1e-9 * scale.max(second.norm()) {
                return Err(invalid(
                    &format!("links[{i}].inertia"),
                    "derived second moment must be positive semidefinite",
                ));
            }
        }

        let mut parent_index = Vec::with_capacity(links.len());
        for (i, joint) in joints.iter().enumerate() {
            match &joint.parent {
                ParentRef::World => parent_index.push(None),
                ParentRef::Link(name) => {
                    let idx = links[..i].iter().position(|l| &l.name == name);
                    match idx {
                        Some(p) => parent_index.push(Some(p)),
                        None => {
                            return Err(invalid(
                                &format!("joints[{i}].parent"),
                                format!(
                                    "parent `{name}` must be a link declared before link `{}`",
                                    links[i].name
                                ),
                            ))
                        }
                    }
                }
            }
            match joint.joint_type {
                JointType::HingeEuler => match joint.axis {
                    Some(axis) => {
                        if (axis.norm() - 1.0).abs() > 1e-9 {
                            return Err(invalid(
                                &format!("joints[{i}].axis"),
                                format!("hinge axis must be unit length, |axis| = {}", axis.norm()),
                            ));
                        }
                    }
                    None => {
                        return Err(invalid(
                            &format!("joints[{i}].axis"),
                            "hinge joints require an axis",
                        ))
                    }
                },
                _ => {
                    if joint.axis.is_some() {
                        return Err(invalid(
                            &format!("joints[{i}].axis"),
                            "axis is only meaningful for hinge joints",
                        ));
                    }
                }
            }
        }

        let mut dof_slices = Vec::with_capacity(joints.len());
        let mut offset = 0usize;
        for joint in &joints {
            let nd = joint.joint_type.dof();
            dof_slices.push(offset..offset + nd);
            offset += nd;
        }

        let moments = links.iter().map(body_moments).collect();
        let origin_rot = joints
            .iter()
            .map(|j| euler_xyz_matrix(&j.origin_rpy))
            .collect();

        Ok(RobotModel {
            links,
            joints,
            dof_slices,
            dof_count: offset,
            parent_index,
            moments,
            origin_rot,
        })
    }

    pub fn dof_count(&self) -> usize {
        self.dof_count
    }

    /// Coordinate slice owned by joint `i` (contiguous, declaration order).
    pub fn dof_slice(&self, joint: usize) -> Range<usize> {
        self.dof_slices[joint].clone()
    }

    pub fn parent_of(&self, link: usize) -> Option<usize> {
        self.parent_index[link]
    }

    pub fn moments(&self, link: usize) -> &MomentTriple {
        &self.moments[link]
    }

    pub fn origin_rotation(&self, joint: usize) -> &Matrix3<f64> {
        &self.origin_rot[joint]
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    /// Index of the first floating-base joint, if the model has one.
    pub fn floating_joint(&self) -> Option<usize> {
        self.joints
            .iter()
            .position(|j| j.joint_type == JointType::FloatingBase)
    }

    /// Parse a robot from a document (`links` and `joints` keys; scenario
    /// sections are ignored if present).
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let doc: ScenarioDoc =
            toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        doc.build_robot()
    }

    /// Serialize the robot as a document that parses back to an identical
    /// model.
    pub fn to_toml_string(&self) -> String {
        let doc = ScenarioDoc::from_robot(self);
        toml::to_string(&doc).expect("robot serialization cannot fail")
    }
}

/// `R = Rx(rx) * Ry(ry) * Rz(rz)`.
pub fn euler_xyz_matrix(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let (sx, cx) = rpy.x.sin_cos();
    let (sy, cy) = rpy.y.sin_cos();
    let (sz, cz) = rpy.z.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Extract XYZ Euler angles from a rotation matrix, inverse of
/// [`euler_xyz_matrix`]. At the chart singularity (`|R[(0,2)]| = 1`) the
/// split between rx and rz is not unique; rz is set to zero there.
pub fn euler_xyz_angles(rot: &Matrix3<f64>) -> Vector3<f64> {
    let sy = rot[(0, 2)].clamp(-1.0, 1.0);
    let ry = sy.asin();
    if sy.abs() < 1.0 - 1e-12 {
        let rx = (-rot[(1, 2)]).atan2(rot[(2, 2)]);
        let rz = (-rot[(0, 1)]).atan2(rot[(0, 0)]);
        Vector3::new(rx, ry, rz)
    } else {
        let rx = rot[(2, 1)].atan2(rot[(1, 1)]);
        Vector3::new(rx, ry, 0.0)
    }
}

/// Simulation method selecting formulation and solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Linearized Newton-Euler baseline, contact forces from one convex QP.
    NeMdp,
    NeNmdpPgm,
    NeNmdpZopgm,
    PbdNmdpPgm,
    PbdNmdpZopgm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::NeMdp => "ne_mdp",
            Method::NeNmdpPgm => "ne_nmdp_pgm",
            Method::NeNmdpZopgm => "ne_nmdp_zopgm",
            Method::PbdNmdpPgm => "pbd_nmdp_pgm",
            Method::PbdNmdpZopgm => "pbd_nmdp_zopgm",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        match name {
            "ne_mdp" => Some(Method::NeMdp),
            "ne_nmdp_pgm" => Some(Method::NeNmdpPgm),
            "ne_nmdp_zopgm" => Some(Method::NeNmdpZopgm),
            "pbd_nmdp_pgm" => Some(Method::PbdNmdpPgm),
            "pbd_nmdp_zopgm" => Some(Method::PbdNmdpZopgm),
            _ => None,
        }
    }

    pub const ALL: [Method; 5] = [
        Method::NeMdp,
        Method::NeNmdpPgm,
        Method::NeNmdpZopgm,
        Method::PbdNmdpPgm,
        Method::PbdNmdpZopgm,
    ];
}

/// Analytic ground: the half-space below the plane `normal . p = offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    /// Unit outward (up) normal.
    pub normal: Vector3<f64>,
    pub offset: f64,
}

/// Friction cone parameters shared by all declared contact points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactModelParams {
    /// Friction coefficient.
    pub mu: f64,
    /// Number of tangent directions in the linearized cone.
    pub tangents: usize,
    /// Cubic penetration stiffness (N/m^3).
    pub stiffness: f64,
    /// Softening constant added to the cubic depth term (m^3). Keeps the
    /// wrench polytope nonzero out of contact.
    pub zeta: f64,
}

impl Default for ContactModelParams {
    fn default() -> Self {
        ContactModelParams {
            mu: 0.7,
            tangents: 4,
            stiffness: 0.0,
            zeta: 1e-3,
        }
    }
}

/// Piecewise-linear reference trajectory knot.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceKnot {
    pub t: f64,
    pub theta: DVector<f64>,
}

/// Stable-PD tracking controller: diagonal gains plus a reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
    pub reference: Vec<ReferenceKnot>,
}

impl ControllerSpec {
    /// Sample the reference at time `t`, linear between knots, clamped at the
    /// ends.
    pub fn reference_at(&self, t: f64) -> DVector<f64> {
        let knots = &self.reference;
        if t <= knots[0].t {
            return knots[0].theta.clone();
        }
        for pair in knots.windows(2) {
            if t <= pair[1].t {
                let span = pair[1].t - pair[0].t;
                let s = if span > 0.0 { (t - pair[0].t) / span } else { 1.0 };
                return &pair[0].theta * (1.0 - s) + &pair[1].theta * s;
            }
        }
        knots[knots.len() - 1].theta.clone()
    }
}

/// A complete, validated simulation setup.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub robot: RobotModel,
    pub gravity: Vector3<f64>,
    pub ground: GroundPlane,
    pub dt_primary: f64,
    pub duration: f64,
    pub method: Method,
    pub contact: ContactModelParams,
    pub controller: Option<ControllerSpec>,
    pub initial_theta: DVector<f64>,
    pub initial_theta_dot: DVector<f64>,
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let doc: ScenarioDoc =
            toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        doc.build_scenario()
    }

    pub fn to_toml_string(&self) -> String {
        let doc = ScenarioDoc::from_scenario(self);
        toml::to_string(&doc).expect("scenario serialization cannot fail")
    }

    fn validate(&self) -> Result<(), ModelError> {
        let n = self.robot.dof_count();
        if !(self.dt_primary > 0.0) {
            return Err(invalid("simulation.dt_primary", "must be positive"));
        }
        if !(self.duration >= 0.0) {
            return Err(invalid("simulation.duration", "must be nonnegative"));
        }
        if !(self.contact.mu >= 0.0) {
            return Err(invalid("contact_model.mu", "must be nonnegative"));
        }
        if self.contact.tangents < 2 {
            return Err(invalid("contact_model.tangents", "need at least 2"));
        }
        if !(self.contact.zeta > 0.0) {
            return Err(invalid("contact_model.zeta", "must be positive"));
        }
        let has_contacts = self.robot.links.iter().any(|l| !l.contact_points.is_empty());
        if has_contacts && !(self.contact.stiffness > 0.0) {
            return Err(invalid(
                "contact_model.stiffness",
                "must be positive when contact points are declared",
            ));
        }
        if (self.ground.normal.norm() - 1.0).abs() > 1e-9 {
            return Err(invalid("ground.normal", "must be unit length"));
        }
        if self.initial_theta.len() != n || self.initial_theta_dot.len() != n {
            return Err(invalid(
                "simulation.initial_theta",
                format!("initial state must have {n} coordinates"),
            ));
        }
        if let Some(ctrl) = &self.controller {
            if ctrl.kp.len() != n || ctrl.kd.len() != n {
                return Err(invalid("controller.kp", format!("gains must have length {n}")));
            }
            if ctrl.kp.iter().chain(ctrl.kd.iter()).any(|&g| !(g >= 0.0)) {
                return Err(invalid("controller.kp", "gains must be entrywise nonnegative"));
            }
            // The floating base is unactuated; its coordinates cannot carry
            // PD torques.
            for (j, joint) in self.robot.joints.iter().enumerate() {
                if joint.joint_type == JointType::FloatingBase {
                    for i in self.robot.dof_slice(j) {
                        if ctrl.kp[i] != 0.0 || ctrl.kd[i] != 0.0 {
                            return Err(invalid(
                                "controller.kp",
                                "gains must be zero on floating-base coordinates",
                            ));
                        }
                    }
                }
            }
            if ctrl.reference.is_empty() {
                return Err(invalid("controller.reference", "need at least one knot"));
            }
            for (k, knot) in ctrl.reference.iter().enumerate() {
                if knot.theta.len() != n {
                    return Err(invalid(
                        &format!("controller.reference[{k}]"),
                        format!("knot must have {n} coordinates"),
                    ));
                }
                if k > 0 && !(knot.t > ctrl.reference[k - 1].t) {
                    return Err(invalid(
                        &format!("controller.reference[{k}].t"),
                        "knot times must be strictly increasing",
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Document (serde) layer
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LinkDoc {
    name: String,
    mass: f64,
    com: [f64; 3],
    inertia: [[f64; 3]; 3],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    inertia_about_com: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    contact_points: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OriginDoc {
    xyz: [f64; 3],
    rpy: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct JointDoc {
    parent: String,
    joint_type: JointType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    origin: OriginDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundDoc {
    normal: [f64; 3],
    offset: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContactModelDoc {
    #[serde(default = "default_mu")]
    mu: f64,
    #[serde(default = "default_tangents")]
    tangents: usize,
    #[serde(default)]
    stiffness: f64,
    #[serde(default = "default_zeta")]
    zeta: f64,
}

fn default_mu() -> f64 {
    0.7
}
fn default_tangents() -> usize {
    4
}
fn default_zeta() -> f64 {
    1e-3
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceKnotDoc {
    t: f64,
    theta: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ControllerDoc {
    kp: Vec<f64>,
    kd: Vec<f64>,
    reference: Vec<ReferenceKnotDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulationDoc {
    dt_primary: f64,
    duration: f64,
    method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_theta_dot: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gravity: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground: Option<GroundDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contact_model: Option<ContactModelDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    controller: Option<ControllerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    simulation: Option<SimulationDoc>,
    links: Vec<LinkDoc>,
    joints: Vec<JointDoc>,
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl ScenarioDoc {
    fn build_robot(&self) -> Result<RobotModel, ModelError> {
        let links = self
            .links
            .iter()
            .map(|l| {
                let mut inertia = Matrix3::from_fn(|r, c| l.inertia[r][c]);
                let com = vec3(l.com);
                if l.inertia_about_com {
                    // Parallel axis shift from the com to the link origin.
                    let shift = (Matrix3::identity() * com.norm_squared()
                        - com * com.transpose())
                        * l.mass;
                    inertia += shift;
                }
                LinkSpec {
                    name: l.name.clone(),
                    mass: l.mass,
                    com,
                    inertia,
                    contact_points: l.contact_points.iter().copied().map(vec3).collect(),
                }
            })
            .collect();
        let joints = self
            .joints
            .iter()
            .map(|j| JointSpec {
                parent: if j.parent == "world" {
                    ParentRef::World
                } else {
                    ParentRef::Link(j.parent.clone())
                },
                joint_type: j.joint_type,
                axis: j.axis.map(vec3),
                origin_xyz: vec3(j.origin.xyz),
                origin_rpy: vec3(j.origin.rpy),
            })
            .collect();
        RobotModel::new(links, joints)
    }

    fn build_scenario(&self) -> Result<ScenarioSpec, ModelError> {
        let robot = self.build_robot()?;
        let n = robot.dof_count();
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| invalid("simulation", "section is required for a scenario"))?;
        let to_dvec = |v: &Option<Vec<f64>>, field: &str| -> Result<DVector<f64>, ModelError> {
            match v {
                None => Ok(DVector::zeros(n)),
                Some(values) => {
                    if values.len() != n {
                        Err(invalid(field, format!("expected {n} entries")))
                    } else {
                        Ok(DVector::from_column_slice(values))
                    }
                }
            }
        };
        let controller = match &self.controller {
            None => None,
            Some(c) => Some(ControllerSpec {
                kp: DVector::from_column_slice(&c.kp),
                kd: DVector::from_column_slice(&c.kd),
                reference: c
                    .reference
                    .iter()
                    .map(|k| ReferenceKnot {
                        t: k.t,
                        theta: DVector::from_column_slice(&k.theta),
                    })
                    .collect(),
            }),
        };
        let contact = match &self.contact_model {
            None => ContactModelParams::default(),
            Some(c) => ContactModelParams {
                mu: c.mu,
                tangents: c.tangents,
                stiffness: c.stiffness,
                zeta: c.zeta,
            },
        };
        let scenario = ScenarioSpec {
            robot,
            gravity: self.gravity.map(vec3).unwrap_or_else(|| Vector3::new(0.0, 0.0, -9.81)),
            ground: match &self.ground {
                None => GroundPlane {
                    normal: Vector3::z(),
                    offset: 0.0,
                },
                Some(g) => GroundPlane {
                    normal: vec3(g.normal),
                    offset: g.offset,
                },
            },
            dt_primary: sim.dt_primary,
            duration: sim.duration,
            method: sim.method,
            contact,
            controller,
            initial_theta: to_dvec(&sim.initial_theta, "simulation.initial_theta")?,
            initial_theta_dot: to_dvec(&sim.initial_theta_dot, "simulation.initial_theta_dot")?,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn from_robot(robot: &RobotModel) -> ScenarioDoc {
        ScenarioDoc {
            gravity: None,
            ground: None,
            contact_model: None,
            controller: None,
            simulation: None,
            links: robot
                .links
                .iter()
                .map(|l| LinkDoc {
                    name: l.name.clone(),
                    mass: l.mass,
                    com: arr3(&l.com),
                    inertia: [
                        [l.inertia[(0, 0)], l.inertia[(0, 1)], l.inertia[(0, 2)]],
                        [l.inertia[(1, 0)], l.inertia[(1, 1)], l.inertia[(1, 2)]],
                        [l.inertia[(2, 0)], l.inertia[(2, 1)], l.inertia[(2, 2)]],
                    ],
                    inertia_about_com: false,
                    contact_points: l.contact_points.iter().map(arr3).collect(),
                })
                .collect(),
            joints: robot
                .joints
                .iter()
                .map(|j| JointDoc {
                    parent: match &j.parent {
                        ParentRef::World => "world".to_string(),
                        ParentRef::Link(name) => name.clone(),
                    },
                    joint_type: j.joint_type,
                    axis: j.axis.as_ref().map(arr3),
                    origin: OriginDoc {
                        xyz: arr3(&j.origin_xyz),
                        rpy: arr3(&j.origin_rpy),
                    },
                })
                .collect(),
        }
    }

    fn from_scenario(s: &ScenarioSpec) -> ScenarioDoc {
        let mut doc = ScenarioDoc::from_robot(&s.robot);
        doc.gravity = Some(arr3(&s.gravity));
        doc.ground = Some(GroundDoc {
            normal: arr3(&s.ground.normal),
            offset: s.ground.offset,
        });
        doc.contact_model = Some(ContactModelDoc {
            mu: s.contact.mu,
            tangents: s.contact.tangents,
            stiffness: s.contact.stiffness,
            zeta: s.contact.zeta,
        });
        doc.controller = s.controller.as_ref().map(|c| ControllerDoc {
            kp: c.kp.iter().copied().collect(),
            kd: c.kd.iter().copied().collect(),
            reference: c
                .reference
                .iter()
                .map(|k| ReferenceKnotDoc {
                    t: k.t,
                    theta: k.theta.iter().copied().collect(),
                })
                .collect(),
        });
        doc.simulation = Some(SimulationDoc {
            dt_primary: s.dt_primary,
            duration: s.duration,
            method: s.method,
            initial_theta: Some(s.initial_theta.iter().copied().collect()),
            initial_theta_dot: Some(s.initial_theta_dot.iter().copied().collect()),
        });
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PENDULUM_DOC: &str = r#"
        [[links]]
        name = "bob"
        mass = 1.0
        com = [0.0, 0.0, -1.0]
        inertia = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]

        [[joints]]
        parent = "world"
        joint_type = "hinge_euler"
        axis = [0.0, 0.0, 1.0]
        origin = { xyz = [0.0, 0.0, 0.0], rpy = [0.0, 0.0, 0.0] }
    "#;

    #[test]
    fn parses_minimal_pendulum() {
        let model = RobotModel::from_toml_str(PENDULUM_DOC).unwrap();
        assert_eq!(model.dof_count(), 1);
        assert_eq!(model.links[0].name, "bob");
    }

    #[test]
    fn rejects_zero_mass() {
        let doc = PENDULUM_DOC.replace("mass = 1.0", "mass = 0.0");
        let err = RobotModel::from_toml_str(&doc).unwrap_err();
        assert!(matches!(err, ModelError::Validation { .. }), "{err}");
    }

    #[test]
    fn rejects_non_unit_axis() {
        let doc = PENDULUM_DOC.replace("axis = [0.0, 0.0, 1.0]", "axis = [0.0, 0.0, 2.0]");
        assert!(RobotModel::from_toml_str(&doc).is_err());
    }

    #[test]
    fn rejects_undeclared_parent() {
        let doc = PENDULUM_DOC.replace("parent = \"world\"", "parent = \"nope\"");
        assert!(RobotModel::from_toml_str(&doc).is_err());
    }

    #[test]
    fn parse_error_carries_location() {
        let err = RobotModel::from_toml_str("links = 3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "expected a location in: {msg}");
    }

    #[test]
    fn two_link_chain_gets_contiguous_slices() {
        let doc = r#"
            [[links]]
            name = "upper"
            mass = 1.0
            com = [0.0, 0.0, -0.5]
            inertia = [[0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.0]]

            [[links]]
            name = "lower"
            mass = 1.0
            com = [0.0, 0.0, -0.5]
            inertia = [[0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.0]]

            [[joints]]
            parent = "world"
            joint_type = "ball_euler"
            origin = { xyz = [0.0, 0.0, 0.0], rpy = [0.0, 0.0, 0.0] }

            [[joints]]
            parent = "upper"
            joint_type = "hinge_euler"
            axis = [0.0, 1.0, 0.0]
            origin = { xyz = [0.0, 0.0, -1.0], rpy = [0.0, 0.0, 0.0] }
        "#;
        let model = RobotModel::from_toml_str(doc).unwrap();
        assert_eq!(model.dof_count(), 4);
        assert_eq!(model.dof_slice(0), 0..3);
        assert_eq!(model.dof_slice(1), 3..4);
        assert_eq!(model.parent_of(1), Some(0));
    }

    #[test]
    fn dof_slices_are_disjoint_and_cover() {
        let model = RobotModel::from_toml_str(PENDULUM_DOC).unwrap();
        let mut seen = vec![false; model.dof_count()];
        for j in 0..model.joints.len() {
            for i in model.dof_slice(j) {
                assert!(!seen[i], "dof {i} covered twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn point_mass_moments() {
        let link = LinkSpec {
            name: "pt".into(),
            mass: 2.0,
            com: Vector3::zeros(),
            inertia: Matrix3::zeros(),
            contact_points: vec![],
        };
        let m = body_moments(&link);
        assert_eq!(m.mass, 2.0);
        assert_eq!(m.first, Vector3::zeros());
        assert_eq!(m.second, Matrix3::zeros());
    }

    #[test]
    fn box_second_moment_is_diagonal_thirds() {
        // Solid box with half-extents (a, b, c), unit mass, centered at the
        // origin: S = diag(a^2, b^2, c^2) / 3.
        let (a, b, c) = (0.3, 0.2, 0.5);
        let ixx = (b * b + c * c) / 3.0;
        let iyy = (a * a + c * c) / 3.0;
        let izz = (a * a + b * b) / 3.0;
        let link = LinkSpec {
            name: "box".into(),
            mass: 1.0,
            com: Vector3::zeros(),
            inertia: Matrix3::from_diagonal(&Vector3::new(ixx, iyy, izz)),
            contact_points: vec![],
        };
        let m = body_moments(&link);
        let expect = Matrix3::from_diagonal(&Vector3::new(a * a / 3.0, b * b / 3.0, c * c / 3.0));
        assert!((m.second - expect).norm() < 1e-14);
    }

    #[test]
    fn inertia_about_com_flag_shifts_to_origin() {
        // A point mass at distance d from the origin has zero inertia about
        // its own com and m*(d^2 Id - d d^T) about the origin.
        let doc = r#"
            [[links]]
            name = "pt"
            mass = 3.0
            com = [0.0, 0.0, -2.0]
            inertia = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
            inertia_about_com = true

            [[joints]]
            parent = "world"
            joint_type = "fixed"
            origin = { xyz = [0.0, 0.0, 0.0], rpy = [0.0, 0.0, 0.0] }
        "#;
        let model = RobotModel::from_toml_str(doc).unwrap();
        let i = model.links[0].inertia;
        assert!((i[(0, 0)] - 12.0).abs() < 1e-12);
        assert!((i[(1, 1)] - 12.0).abs() < 1e-12);
        assert!(i[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn robot_roundtrip_identical() {
        let model = RobotModel::from_toml_str(PENDULUM_DOC).unwrap();
        let text = model.to_toml_string();
        let reparsed = RobotModel::from_toml_str(&text).unwrap();
        assert_eq!(model, reparsed);
    }

    #[test]
    fn euler_angles_roundtrip() {
        let rpy = Vector3::new(0.3, -0.8, 2.1);
        let rot = euler_xyz_matrix(&rpy);
        let back = euler_xyz_angles(&rot);
        assert!((rpy - back).norm() < 1e-12);
    }

    #[test]
    fn reference_interpolation_clamps_and_blends() {
        let ctrl = ControllerSpec {
            kp: DVector::zeros(1),
            kd: DVector::zeros(1),
            reference: vec![
                ReferenceKnot { t: 0.0, theta: DVector::from_element(1, 1.0) },
                ReferenceKnot { t: 1.0, theta: DVector::from_element(1, 3.0) },
            ],
        };
        assert_eq!(ctrl.reference_at(-1.0)[0], 1.0);
        assert_eq!(ctrl.reference_at(0.5)[0], 2.0);
        assert_eq!(ctrl.reference_at(9.0)[0], 3.0);
    }
}

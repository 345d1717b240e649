//! Pose-dependent contact wrench polytopes.
//!
//! A contact point admits forces `f = v(theta) w` with `w >= 0` and
//! `sum(w) <= 1`: the convex hull of the origin and the columns of the
//! vertex matrix `v`. The shipped model is a smooth cubic friction cone
//! against an analytic ground plane; anything pose-dependent and smooth
//! (e.g. a learned wrench model) drops in behind [`WrenchSpace`]. A model
//! may decline to provide vertex Jacobians, which restricts the solver to
//! its zeroth-order variant.

use crate::kinematics::{point_hessian, point_jacobian, KinematicCache};
use crate::robot_model::{ContactModelParams, GroundPlane, RobotModel};
use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("weight vector has length {got}, contact set needs {expected}")]
    PartitionMismatch { expected: usize, got: usize },
}

/// A convex polytope of admissible contact forces, attached to a link point.
///
/// `vertices` returns the 3 x V vertex matrix at the cache's configuration;
/// `vertex_jacobian` returns per-coordinate derivative matrices
/// `dv/dtheta_j` (same shape as `vertices`), or `None` if the model cannot
/// provide them.
pub trait WrenchSpace: Send + Sync {
    /// Link index and attachment point in the link frame.
    fn attachment(&self) -> (usize, Vector3<f64>);

    fn vertex_count(&self) -> usize;

    fn vertices(&self, model: &RobotModel, cache: &KinematicCache) -> Matrix3xX<f64>;

    fn vertex_jacobian(
        &self,
        model: &RobotModel,
        cache: &KinematicCache,
    ) -> Option<Vec<Matrix3xX<f64>>>;

    /// Penetration depth at the current pose (diagnostic).
    fn depth(&self, model: &RobotModel, cache: &KinematicCache) -> f64;
}

/// Signed penetration of a world point into the half-space below `plane`:
/// `d = max(0, offset - normal . p)`, with gradient `-normal` while
/// penetrating and zero otherwise (the cubic in the cone smooths the kink).
pub fn penetration_depth(point: &Vector3<f64>, plane: &GroundPlane) -> (f64, Vector3<f64>) {
    let signed = plane.normal.dot(point) - plane.offset;
    if signed < 0.0 {
        (-signed, -plane.normal)
    } else {
        (0.0, Vector3::zeros())
    }
}

/// Deterministic orthonormal tangent basis for a unit normal.
fn tangent_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let candidates = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut best = candidates[0];
    let mut best_dot = f64::INFINITY;
    for c in candidates {
        let d = normal.dot(&c).abs();
        if d < best_dot {
            best_dot = d;
            best = c;
        }
    }
    let t1 = normal.cross(&best).normalize();
    let t2 = normal.cross(&t1);
    (t1, t2)
}

/// Smooth cubic friction cone: vertex `i` is
/// `k (d^3 + zeta) (n + t_i mu)` with `d` the penetration depth and `t_i`
/// evenly spaced unit tangents. The `d^3` factor keeps vertices and their
/// first two derivatives continuous across contact; `zeta > 0` keeps the
/// polytope nonzero out of contact.
#[derive(Debug, Clone)]
pub struct SmoothFrictionCone {
    pub link: usize,
    pub point_local: Vector3<f64>,
    pub plane: GroundPlane,
    pub mu: f64,
    pub tangent_count: usize,
    /// Stiffness scale k (N/m^3).
    pub stiffness: f64,
    pub zeta: f64,
}

impl SmoothFrictionCone {
    pub fn new(
        link: usize,
        point_local: Vector3<f64>,
        plane: GroundPlane,
        params: &ContactModelParams,
    ) -> Self {
        SmoothFrictionCone {
            link,
            point_local,
            plane,
            mu: params.mu,
            tangent_count: params.tangents,
            stiffness: params.stiffness,
            zeta: params.zeta,
        }
    }

    /// Vertex directions `n + t_i mu`, fixed by the plane.
    fn raysets(&self) -> Vec<Vector3<f64>> {
        let (t1, t2) = tangent_basis(&self.plane.normal);
        (0..self.tangent_count)
            .map(|i| {
                let phi = 2.0 * std::f64::consts::PI * (i as f64) / (self.tangent_count as f64);
                self.plane.normal + (t1 * phi.cos() + t2 * phi.sin()) * self.mu
            })
            .collect()
    }
}

impl WrenchSpace for SmoothFrictionCone {
    fn attachment(&self) -> (usize, Vector3<f64>) {
        (self.link, self.point_local)
    }

    fn vertex_count(&self) -> usize {
        self.tangent_count
    }

    fn vertices(&self, _model: &RobotModel, cache: &KinematicCache) -> Matrix3xX<f64> {
        let world = cache.poses[self.link].point(&self.point_local);
        let (d, _) = penetration_depth(&world, &self.plane);
        let scale = self.stiffness * (d * d * d + self.zeta);
        let rays = self.raysets();
        Matrix3xX::from_columns(&rays.iter().map(|r| r * scale).collect::<Vec<_>>())
    }

    fn vertex_jacobian(
        &self,
        _model: &RobotModel,
        cache: &KinematicCache,
    ) -> Option<Vec<Matrix3xX<f64>>> {
        let n = cache.dof_count;
        let world = cache.poses[self.link].point(&self.point_local);
        let (d, dd_dx) = penetration_depth(&world, &self.plane);
        let jac = point_jacobian(cache, self.link, &self.point_local).expect("valid link");
        let rays = self.raysets();
        let v = self.tangent_count;
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            // d(scale)/dtheta_j = k * 3 d^2 * (dd_dx . dX/dtheta_j)
            let jcol: Vector3<f64> = jac.fixed_view::<3, 1>(0, j).into_owned();
            let dscale = self.stiffness * 3.0 * d * d * dd_dx.dot(&jcol);
            let mut m = Matrix3xX::zeros(v);
            if dscale != 0.0 {
                for (i, r) in rays.iter().enumerate() {
                    m.column_mut(i).copy_from(&(r * dscale));
                }
            }
            out.push(m);
        }
        Some(out)
    }

    fn depth(&self, _model: &RobotModel, cache: &KinematicCache) -> f64 {
        let world = cache.poses[self.link].point(&self.point_local);
        penetration_depth(&world, &self.plane).0
    }
}

/// Force actually exerted at one contact.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactForceRecord {
    /// `f = v w` in world coordinates (N).
    pub force: Vector3<f64>,
    pub weights: DVector<f64>,
    pub depth: f64,
}

/// An ordered set of contacts with the weight-vector partition they induce.
pub struct ContactSet {
    contacts: Vec<Box<dyn WrenchSpace>>,
    blocks: Vec<Range<usize>>,
    total: usize,
}

impl ContactSet {
    pub fn new(contacts: Vec<Box<dyn WrenchSpace>>) -> Self {
        let mut blocks = Vec::with_capacity(contacts.len());
        let mut offset = 0;
        for c in &contacts {
            blocks.push(offset..offset + c.vertex_count());
            offset += c.vertex_count();
        }
        ContactSet {
            contacts,
            blocks,
            total: offset,
        }
    }

    pub fn empty() -> Self {
        ContactSet::new(Vec::new())
    }

    /// Build one smooth cone per declared contact point, links in order,
    /// points in declaration order.
    pub fn from_scenario(
        model: &RobotModel,
        ground: &GroundPlane,
        params: &ContactModelParams,
    ) -> Self {
        let mut contacts: Vec<Box<dyn WrenchSpace>> = Vec::new();
        for (li, link) in model.links.iter().enumerate() {
            for pt in &link.contact_points {
                contacts.push(Box::new(SmoothFrictionCone::new(li, *pt, *ground, params)));
            }
        }
        ContactSet::new(contacts)
    }

    pub fn len(&self) -> usize {
        self.contacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contacts.is_empty()
    }

    /// Total weight dimension W (sum of vertex counts).
    pub fn weight_dim(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn contact(&self, i: usize) -> &dyn WrenchSpace {
        self.contacts[i].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn WrenchSpace> {
        self.contacts.iter().map(|c| c.as_ref())
    }

    /// True when every contact can provide vertex Jacobians.
    pub fn jacobians_available(&self, model: &RobotModel, cache: &KinematicCache) -> bool {
        self.contacts
            .iter()
            .all(|c| c.vertex_jacobian(model, cache).is_some())
    }

    /// Per-contact force records for a weight vector.
    pub fn force_records(
        &self,
        model: &RobotModel,
        cache: &KinematicCache,
        w: &DVector<f64>,
    ) -> Result<Vec<ContactForceRecord>, ContactError> {
        if w.len() != self.total {
            return Err(ContactError::PartitionMismatch {
                expected: self.total,
                got: w.len(),
            });
        }
        let mut out = Vec::with_capacity(self.contacts.len());
        for (c, block) in self.contacts.iter().zip(&self.blocks) {
            let v = c.vertices(model, cache);
            let wx = DVector::from_iterator(block.len(), block.clone().map(|i| w[i]));
            out.push(ContactForceRecord {
                force: &v * &wx,
                weights: wx,
                depth: c.depth(model, cache),
            });
        }
        Ok(out)
    }
}

/// Everything the dynamics residual needs from the contact set at one pose.
pub struct ContactTerms {
    /// `sum_x J_x^T v_x w_x` (n).
    pub force_term: DVector<f64>,
    /// `dG/dw` blocks: `-J_x^T v_x`, assembled into an n x W matrix.
    pub dg_dw: DMatrix<f64>,
    /// `sum_x (d2X/dtheta2)^T v_x w_x`, an n x n matrix. Appears in both the
    /// exact and the inexact residual Jacobian.
    pub hessian_term: DMatrix<f64>,
    /// `sum_x J_x^T (dv_x/dtheta_j) w_x`: the exact-Jacobian correction the
    /// zeroth-order variant drops. `None` when some vertex Jacobian is
    /// unavailable.
    pub vertex_term: Option<DMatrix<f64>>,
}

/// Assemble the contact contributions for weights `w`.
pub fn assemble_contact_terms(
    set: &ContactSet,
    model: &RobotModel,
    cache: &KinematicCache,
    w: &DVector<f64>,
) -> Result<ContactTerms, ContactError> {
    let n = cache.dof_count;
    if w.len() != set.weight_dim() {
        return Err(ContactError::PartitionMismatch {
            expected: set.weight_dim(),
            got: w.len(),
        });
    }
    let mut force_term = DVector::zeros(n);
    let mut dg_dw = DMatrix::zeros(n, set.weight_dim());
    let mut hessian_term = DMatrix::zeros(n, n);
    let mut vertex_term = Some(DMatrix::zeros(n, n));

    for (c, block) in set.iter().zip(set.blocks()) {
        let (link, local) = c.attachment();
        let jac = point_jacobian(cache, link, &local).expect("valid link");
        let v = c.vertices(model, cache);
        let wx = DVector::from_iterator(block.len(), block.clone().map(|i| w[i]));
        let f = &v * &wx;

        force_term += jac.transpose() * &f;

        let neg_jt_v = -(jac.transpose() * &v);
        dg_dw.view_mut((0, block.start), (n, block.len())).copy_from(&neg_jt_v);

        if f != Vector3::zeros() {
            let hess = point_hessian(cache, link, &local).expect("valid link");
            for &a in cache.active_dofs(link) {
                for &b in cache.active_dofs(link) {
                    hessian_term[(a, b)] += hess.at(a, b).dot(&f);
                }
            }
        }

        match (c.vertex_jacobian(model, cache), vertex_term.as_mut()) {
            (Some(dv), Some(acc)) => {
                for j in 0..n {
                    let df = &dv[j] * &wx;
                    if df != Vector3::zeros() {
                        let col = jac.transpose() * df;
                        for i in 0..n {
                            acc[(i, j)] += col[i];
                        }
                    }
                }
            }
            (None, _) => vertex_term = None,
            _ => {}
        }
    }
    Ok(ContactTerms {
        force_term,
        dg_dw,
        hessian_term,
        vertex_term,
    })
}

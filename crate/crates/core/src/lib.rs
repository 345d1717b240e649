//! Articulated rigid body dynamics with simultaneous frictional contacts.
//!
//! Contact forces are resolved by the maximal dissipation principle (MDP):
//! among all feasible contact forces, pick the ones that minimize the
//! post-step kinetic energy. The classic MDP solver linearizes the dynamics
//! at the current state and solves a single convex QP. This crate instead
//! couples the *nonlinear* backward-Euler dynamics with pose-dependent
//! contact wrench polytopes and solves the pair jointly by a projected
//! gradient method (first-order, or a zeroth-order variant that never
//! needs vertex Jacobians), wrapped in adaptive timestep control.
//!
//! Module map:
//! - [`robot_model`]: robot/scenario descriptions, validation, inertial moments
//! - [`kinematics`]: forward kinematics with first/second derivative tensors
//! - [`dynamics`]: backward-Euler residuals, kinetic energies, exact Jacobians
//! - [`contact`]: smooth friction-cone wrench polytopes behind a generic trait
//! - [`qp_solver`]: small dense QPs over per-contact capped simplices
//! - [`pgm`]: the projected gradient method and its manifold projection
//! - [`stepper`]: adaptive time integration, baseline MDP, trajectory driver

pub mod contact;
pub mod dynamics;
pub mod kinematics;
pub mod pgm;
pub mod qp_solver;
pub mod robot_model;
pub mod stepper;

pub use contact::{ContactForceRecord, ContactSet, SmoothFrictionCone, WrenchSpace};
pub use dynamics::{Formulation, ResidualBundle, StateTriple, TorqueModel};
pub use kinematics::{fk, KinematicCache, LinkPose};
pub use pgm::{GradientOrder, PgmConfig, PgmStats};
pub use robot_model::{
    GroundPlane, JointSpec, JointType, LinkSpec, Method, RobotModel, ScenarioSpec,
};
pub use stepper::{run_trajectory, StepResult, TrajectoryRecord};

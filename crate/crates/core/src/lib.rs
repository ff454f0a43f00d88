//! Quasi-static soft-robot toolkit: nonlinear FEM condensed into
//! actuator/effector compliance data, a small MLP that learns that compact
//! mechanical representation, and a QP-based inverse-kinematics loop that can
//! run on either the full model or the learned surrogate.

pub mod condense;
pub mod constraints;
pub mod control;
pub mod error;
pub mod fem;
pub mod learn;
pub mod mesh;
pub mod parallel;
pub mod qp;
pub mod robot;
pub mod sparse;

pub use error::{Error, Result};

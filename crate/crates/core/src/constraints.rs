//! Cable actuators and effector points expressed as constraint rows.
//!
//! Every constraint is a scalar (or 3-vector) function of the node positions;
//! its Jacobian rows enter the condensation as H. For cables the measured
//! value is the pull-in displacement `delta_a = rest_length - current_length`,
//! so positive values mean the cable has been drawn in. The actuation force on
//! the nodes for a tension `lambda >= 0` is `H_a^T lambda` with
//! `H_a = d(delta_a)/dx`, which points along the cable and shortens it.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TetMesh;

/// Minimum segment length; below this the path Jacobian is undefined.
pub const SEGMENT_TOL: f64 = 1e-9;

/// A cable threaded through mesh nodes, optionally starting at a fixed
/// external pull point. Cables pull but never push.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CableActuator {
    pub via_nodes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pull_anchor: Option<[f64; 3]>,
    /// Force intensity bounds `[lambda_min, lambda_max]`, with `lambda_min >= 0`.
    pub lambda_bounds: [f64; 2],
    /// Pull-in displacement course `[delta_min, delta_max]`.
    pub delta_bounds: [f64; 2],
}

/// A controlled material point: a mesh node or a barycentric point on a tet.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EffectorPoint {
    Node { node: usize },
    Barycentric { tet: usize, weights: [f64; 4] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Effector {
    #[serde(flatten)]
    pub point: EffectorPoint,
    pub goal: [f64; 3],
}

#[inline]
pub fn node_position(x: &[f64], node: usize) -> Vector3<f64> {
    Vector3::new(x[3 * node], x[3 * node + 1], x[3 * node + 2])
}

impl CableActuator {
    pub fn validate(&self, mesh: &TetMesh) -> Result<()> {
        let path_points = self.via_nodes.len() + usize::from(self.pull_anchor.is_some());
        if path_points < 2 {
            return Err(Error::InvalidArgument(
                "cable needs at least two path points".into(),
            ));
        }
        for &n in &self.via_nodes {
            if n >= mesh.node_count() {
                return Err(Error::InvalidArgument(format!(
                    "cable via node {n} out of range ({} nodes)",
                    mesh.node_count()
                )));
            }
        }
        if self.lambda_bounds[0] < 0.0 {
            return Err(Error::InvalidArgument(
                "cables can be pulled but not pushed: lambda_min must be >= 0".into(),
            ));
        }
        if self.lambda_bounds[0] > self.lambda_bounds[1]
            || self.delta_bounds[0] > self.delta_bounds[1]
        {
            return Err(Error::InvalidArgument("empty actuator bound interval".into()));
        }
        Ok(())
    }

    /// Path points at state `x`: the optional anchor followed by the via nodes.
    fn path(&self, x: &[f64]) -> Vec<Vector3<f64>> {
        let mut pts = Vec::with_capacity(self.via_nodes.len() + 1);
        if let Some(a) = self.pull_anchor {
            pts.push(Vector3::new(a[0], a[1], a[2]));
        }
        for &n in &self.via_nodes {
            pts.push(node_position(x, n));
        }
        pts
    }

    /// Sum of Euclidean segment lengths along the path at state `x`.
    pub fn length(&self, x: &[f64]) -> f64 {
        let pts = self.path(x);
        pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Rest path length (evaluated on the rest configuration).
    pub fn rest_length(&self, mesh: &TetMesh) -> f64 {
        let mut pts: Vec<Vector3<f64>> = Vec::new();
        if let Some(a) = self.pull_anchor {
            pts.push(Vector3::new(a[0], a[1], a[2]));
        }
        for &n in &self.via_nodes {
            pts.push(mesh.rest_nodes[n].coords);
        }
        pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Pull-in displacement at state `x`.
    pub fn pull_in(&self, x: &[f64], mesh: &TetMesh) -> f64 {
        self.rest_length(mesh) - self.length(x)
    }

    /// Gradient of the path length w.r.t. node positions, as sparse
    /// `(node, Vector3)` pairs. Each via node's entry is the sum of the unit
    /// vectors of its adjacent segments pointing away from the neighbors.
    pub fn length_jacobian(&self, x: &[f64], cable_index: usize) -> Result<Vec<(usize, Vector3<f64>)>> {
        let pts = self.path(x);
        let has_anchor = self.pull_anchor.is_some();

        let mut units = Vec::with_capacity(pts.len() - 1);
        for (s, w) in pts.windows(2).enumerate() {
            let d = w[1] - w[0];
            let len = d.norm();
            if len <= SEGMENT_TOL {
                return Err(Error::DegenerateSegment {
                    cable: cable_index,
                    segment: s,
                    length: len,
                });
            }
            units.push(d / len);
        }

        let mut rows = Vec::with_capacity(self.via_nodes.len());
        for (vi, &node) in self.via_nodes.iter().enumerate() {
            let p = vi + usize::from(has_anchor); // index in the path
            let mut g = Vector3::zeros();
            if p > 0 {
                g += units[p - 1]; // segment arriving at this point
            }
            if p < units.len() {
                g -= units[p]; // segment leaving this point
            }
            rows.push((node, g));
        }
        Ok(rows)
    }

    /// Gradient of the pull-in displacement (the constraint row used in H_a).
    pub fn pull_in_jacobian(&self, x: &[f64], cable_index: usize) -> Result<Vec<(usize, Vector3<f64>)>> {
        let mut rows = self.length_jacobian(x, cable_index)?;
        for (_, g) in &mut rows {
            *g = -*g;
        }
        Ok(rows)
    }

    /// Hessian of the path length as sparse `(node_i, node_j, 3x3)` blocks
    /// (upper node pairs plus diagonals). Positive semidefinite; scaled by the
    /// cable tension it is the geometric stiffness of the cable force.
    pub fn length_hessian(
        &self,
        x: &[f64],
        cable_index: usize,
    ) -> Result<Vec<(usize, usize, Matrix3<f64>)>> {
        let pts = self.path(x);
        let has_anchor = self.pull_anchor.is_some();
        let mut blocks = Vec::new();

        for (s, w) in pts.windows(2).enumerate() {
            let d = w[1] - w[0];
            let len = d.norm();
            if len <= SEGMENT_TOL {
                return Err(Error::DegenerateSegment {
                    cable: cable_index,
                    segment: s,
                    length: len,
                });
            }
            let t = d / len;
            let m = (Matrix3::identity() - t * t.transpose()) / len;

            // Path indices s, s+1 map to via nodes (or the anchor, which has
            // no DOFs and contributes nothing).
            let node_of = |p: usize| -> Option<usize> {
                if has_anchor && p == 0 {
                    None
                } else {
                    Some(self.via_nodes[p - usize::from(has_anchor)])
                }
            };
            let a = node_of(s);
            let b = node_of(s + 1);
            if let Some(a) = a {
                blocks.push((a, a, m));
            }
            if let Some(b) = b {
                blocks.push((b, b, m));
            }
            if let (Some(a), Some(b)) = (a, b) {
                blocks.push((a, b, -m));
            }
        }
        Ok(blocks)
    }
}

impl Effector {
    pub fn validate(&self, mesh: &TetMesh) -> Result<()> {
        match self.point {
            EffectorPoint::Node { node } => {
                if node >= mesh.node_count() {
                    return Err(Error::InvalidArgument(format!(
                        "effector node {node} out of range"
                    )));
                }
            }
            EffectorPoint::Barycentric { tet, weights } => {
                if tet >= mesh.tets.len() {
                    return Err(Error::InvalidArgument(format!(
                        "effector tet {tet} out of range"
                    )));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "barycentric weights sum to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nodes supporting the effector with their interpolation weights.
    pub fn support<'m>(&self, mesh: &'m TetMesh) -> Vec<(usize, f64)> {
        match self.point {
            EffectorPoint::Node { node } => vec![(node, 1.0)],
            EffectorPoint::Barycentric { tet, weights } => mesh.tets[tet]
                .iter()
                .zip(weights.iter())
                .map(|(&n, &w)| (n, w))
                .collect(),
        }
    }

    /// Interpolated effector position at state `x`.
    pub fn position(&self, x: &[f64], mesh: &TetMesh) -> Vector3<f64> {
        self.support(mesh)
            .iter()
            .map(|&(n, w)| node_position(x, n) * w)
            .sum()
    }

    /// Violation `delta_e = x_effector - x_goal`.
    pub fn violation(&self, x: &[f64], mesh: &TetMesh) -> Vector3<f64> {
        self.position(x, mesh) - Vector3::new(self.goal[0], self.goal[1], self.goal[2])
    }
}

/// One constraint row as sparse per-node 3-vectors.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub entries: Vec<(usize, Vector3<f64>)>,
}

impl ConstraintRow {
    /// Dense expansion on the full DOF vector, with fixed DOFs zeroed.
    pub fn to_dense(&self, dof_count: usize, fixed: &[bool]) -> Vec<f64> {
        let mut row = vec![0.0; dof_count];
        for &(node, v) in &self.entries {
            for c in 0..3 {
                let dof = 3 * node + c;
                if !fixed[dof] {
                    row[dof] = v[c];
                }
            }
        }
        row
    }

    pub fn dot(&self, x: &[f64], fixed: &[bool]) -> f64 {
        let mut s = 0.0;
        for &(node, v) in &self.entries {
            for c in 0..3 {
                let dof = 3 * node + c;
                if !fixed[dof] {
                    s += v[c] * x[dof];
                }
            }
        }
        s
    }
}

/// The robot's full constraint system: effector rows first, actuator rows
/// after, matching the block order of the condensed compliance matrix.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub actuators: Vec<CableActuator>,
    pub effectors: Vec<Effector>,
}

impl ConstraintSet {
    pub fn new(actuators: Vec<CableActuator>, effectors: Vec<Effector>, mesh: &TetMesh) -> Result<Self> {
        for c in &actuators {
            c.validate(mesh)?;
        }
        for e in &effectors {
            e.validate(mesh)?;
        }
        Ok(ConstraintSet { actuators, effectors })
    }

    pub fn effector_row_count(&self) -> usize {
        3 * self.effectors.len()
    }

    pub fn actuator_row_count(&self) -> usize {
        self.actuators.len()
    }

    pub fn row_count(&self) -> usize {
        self.effector_row_count() + self.actuator_row_count()
    }

    /// Effector selection rows (3 per effector) at any state.
    pub fn effector_rows(&self, mesh: &TetMesh) -> Vec<ConstraintRow> {
        let mut rows = Vec::with_capacity(self.effector_row_count());
        for e in &self.effectors {
            let support = e.support(mesh);
            for c in 0..3 {
                let entries = support
                    .iter()
                    .map(|&(n, w)| {
                        let mut v = Vector3::zeros();
                        v[c] = w;
                        (n, v)
                    })
                    .collect();
                rows.push(ConstraintRow { entries });
            }
        }
        rows
    }

    /// Actuator rows `d(delta_a)/dx` at state `x`.
    pub fn actuator_rows(&self, x: &[f64]) -> Result<Vec<ConstraintRow>> {
        self.actuators
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(ConstraintRow { entries: c.pull_in_jacobian(x, i)? }))
            .collect()
    }

    /// All rows in block order [effectors; actuators].
    pub fn all_rows(&self, x: &[f64], mesh: &TetMesh) -> Result<Vec<ConstraintRow>> {
        let mut rows = self.effector_rows(mesh);
        rows.extend(self.actuator_rows(x)?);
        Ok(rows)
    }

    /// Pull-in displacements of all cables at state `x`.
    pub fn pull_ins(&self, x: &[f64], mesh: &TetMesh) -> Vec<f64> {
        self.actuators.iter().map(|c| c.pull_in(x, mesh)).collect()
    }

    /// Effector violations stacked into a single vector.
    pub fn effector_violations(&self, x: &[f64], mesh: &TetMesh) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.effector_row_count());
        for e in &self.effectors {
            let d = e.violation(x, mesh);
            out.extend_from_slice(d.as_slice());
        }
        out
    }

    /// Node pairs coupled by cable segments, for stiffness profile
    /// construction (consecutive via nodes need not be mesh neighbors).
    pub fn coupling_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for c in &self.actuators {
            for w in c.via_nodes.windows(2) {
                edges.push((w[0], w[1]));
            }
        }
        edges
    }
}

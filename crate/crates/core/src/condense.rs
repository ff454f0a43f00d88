//! Projection of the FEM compliance into constraint space.
//!
//! At an equilibrium the tangent stiffness is factored once and reused for
//! every column of `W_ij = H_i K^{-1} H_j^T` plus the free-motion solve, so
//! the cost of a step is one factorization and `rows + 1` triangular solves.
//! The free violations are evaluated on the free-motion configuration: the
//! one-step relaxation of the robot with all actuation forces removed.

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::fem::FemSystem;
use crate::parallel::{map_indexed, Parallelism};

/// Compact mechanical representation at one equilibrium: the condensed
/// compliance matrix in block order `[effector rows; actuator rows]`, the
/// free violations, and the measured actuation state.
#[derive(Debug, Clone)]
pub struct CondensedState {
    pub w: DMatrix<f64>,
    pub delta_e_free: DVector<f64>,
    pub delta_a_free: DVector<f64>,
    /// Measured pull-in displacements at the equilibrium this state was
    /// condensed from.
    pub delta_a: DVector<f64>,
    pub effector_rows: usize,
    pub actuator_rows: usize,
}

impl CondensedState {
    pub fn dim(&self) -> usize {
        self.effector_rows + self.actuator_rows
    }

    pub fn w_ee(&self) -> DMatrix<f64> {
        self.w.view((0, 0), (self.effector_rows, self.effector_rows)).into()
    }

    pub fn w_ea(&self) -> DMatrix<f64> {
        self.w
            .view((0, self.effector_rows), (self.effector_rows, self.actuator_rows))
            .into()
    }

    pub fn w_ae(&self) -> DMatrix<f64> {
        self.w
            .view((self.effector_rows, 0), (self.actuator_rows, self.effector_rows))
            .into()
    }

    pub fn w_aa(&self) -> DMatrix<f64> {
        self.w
            .view(
                (self.effector_rows, self.effector_rows),
                (self.actuator_rows, self.actuator_rows),
            )
            .into()
    }

    /// Largest relative deviation from symmetry, `||W - W^T|| / ||W||`.
    pub fn asymmetry(&self) -> f64 {
        let mut num: f64 = 0.0;
        let mut den: f64 = 1e-300;
        for i in 0..self.w.nrows() {
            for j in 0..self.w.ncols() {
                num = num.max((self.w[(i, j)] - self.w[(j, i)]).abs());
                den = den.max(self.w[(i, j)].abs());
            }
        }
        num / den
    }

    /// Upper-triangular (row-major, diagonal included) flattening of W.
    pub fn w_triangle(&self) -> Vec<f64> {
        let n = self.w.nrows();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push(self.w[(i, j)]);
            }
        }
        out
    }
}

/// Rebuilds the full symmetric matrix from its upper-triangular flattening.
pub fn symmetric_from_triangle(tri: &[f64], dim: usize) -> DMatrix<f64> {
    assert_eq!(tri.len(), dim * (dim + 1) / 2, "triangle length mismatch");
    let mut w = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            w[(i, j)] = tri[k];
            w[(j, i)] = tri[k];
            k += 1;
        }
    }
    w
}

/// Number of upper-triangle entries for a `dim x dim` symmetric matrix.
pub fn triangle_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Condenses the system at its current equilibrium under applied cable
/// tensions `lambda` (empty slice for the unactuated anchor).
///
/// The factored matrix is the full tangent of the potential at the
/// equilibrium, elastic stiffness plus the geometric stiffness of the
/// tensioned cables. With that tangent the condensed blocks are the exact
/// first-order response of the equilibrium to actuation changes, and the
/// factorization stays positive definite at bent, co-contracted states where
/// the elastic part alone is not.
///
/// Leaves the system's positions untouched and its stiffness factored at the
/// current state.
pub fn condense(system: &mut FemSystem, set: &ConstraintSet, lambda: &[f64]) -> Result<CondensedState> {
    condense_with(system, set, lambda, Parallelism::Auto)
}

/// [`condense`] with an explicit parallelism choice for the per-column
/// triangular solves.
pub fn condense_with(
    system: &mut FemSystem,
    set: &ConstraintSet,
    lambda: &[f64],
    par: Parallelism,
) -> Result<CondensedState> {
    let x_eq = system.positions().to_vec();

    if lambda.is_empty() {
        system.assemble()?;
    } else {
        system.assemble_with_cable_tension(lambda)?;
    }
    system.factor()?;

    // Free motion: one linearized relaxation with actuation forces removed.
    let rhs: Vec<f64> = {
        let f_ext = system.external_forces();
        let f_int = system.internal_forces();
        (0..x_eq.len()).map(|i| f_ext[i] + f_int[i]).collect()
    };
    let dx_free = system.solve_linear(&rhs);
    let x_free: Vec<f64> = x_eq.iter().zip(&dx_free).map(|(x, d)| x + d).collect();

    let delta_e_free = DVector::from_vec(set.effector_violations(&x_free, &system.mesh));
    let delta_a_free = DVector::from_vec(set.pull_ins(&x_free, &system.mesh));
    let delta_a = DVector::from_vec(set.pull_ins(&x_eq, &system.mesh));

    // Constraint rows at the equilibrium state.
    let rows = set.all_rows(&x_eq, &system.mesh)?;
    let fixed = system.fixed_dofs();
    let dense_rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.to_dense(x_eq.len(), fixed))
        .collect();
    for (i, r) in dense_rows.iter().enumerate() {
        if r.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateConstraint(i));
        }
    }

    let n_rows = dense_rows.len();
    let sys_ref: &FemSystem = system;
    let cols: Vec<Vec<f64>> = map_indexed(par, n_rows, |j| sys_ref.solve_linear(&dense_rows[j]));

    let mut w = DMatrix::zeros(n_rows, n_rows);
    for i in 0..n_rows {
        for j in 0..n_rows {
            let mut s = 0.0;
            for (k, &hik) in dense_rows[i].iter().enumerate() {
                if hik != 0.0 {
                    s += hik * cols[j][k];
                }
            }
            w[(i, j)] = s;
        }
    }

    Ok(CondensedState {
        w,
        delta_e_free,
        delta_a_free,
        delta_a,
        effector_rows: set.effector_row_count(),
        actuator_rows: set.actuator_row_count(),
    })
}

/// Direct-kinematics Jacobian `J = W_ea W_aa^{-1}` mapping actuator
/// displacement changes to effector displacement changes.
pub fn direct_jacobian(state: &CondensedState) -> Result<DMatrix<f64>> {
    let w_aa = state.w_aa();
    let svd = w_aa.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let cond = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::Singular { context: "W_aa".into(), cond });
    }

    // J^T solves W_aa^T J^T = W_ea^T (W_aa symmetric).
    let lu = w_aa.lu();
    let jt = lu
        .solve(&state.w_ea().transpose())
        .ok_or_else(|| Error::Singular { context: "W_aa".into(), cond })?;
    Ok(jt.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{CableActuator, ConstraintSet, Effector, EffectorPoint};
    use crate::fem::{FemSystem, Material};
    use crate::mesh::build_box_mesh;
    use nalgebra::Vector3;

    fn thin_column(l_total: f64, mid_z: f64, width: f64) -> FemSystem {
        // Two stacked cells of heights mid_z and l_total - mid_z.
        let mut mesh = build_box_mesh([width, width, l_total], [1, 1, 2]).unwrap();
        for p in mesh.nodes.iter_mut().chain(mesh.rest_nodes.iter_mut()) {
            if (p.z - l_total / 2.0).abs() < 1e-9 {
                p.z = mid_z;
            }
        }
        let fixed: Vec<usize> = (0..4).collect(); // base layer
        FemSystem::new(
            mesh,
            Material::new(1.0, 0.0, 0.0).unwrap(),
            &fixed,
            Vector3::zeros(),
            vec![CableActuator {
                via_nodes: vec![8], // a top corner node
                pull_anchor: Some([0.0, 0.0, -1.0]),
                lambda_bounds: [0.0, 1.0],
                delta_bounds: [0.0, 1.0],
            }],
        )
        .unwrap()
    }

    #[test]
    fn series_spring_compliance() {
        // Springs k_i = E A / L_i in series; the cable sees their summed
        // compliance. A thin slender column keeps the FEM response within a
        // few percent of the 1D law.
        let (l1, l2, width) = (5.0, 10.0, 0.2);
        let mut sys = thin_column(l1 + l2, l1, width);
        let cable = sys.cables()[0].clone();
        let set = ConstraintSet::new(vec![cable], vec![], &sys.mesh).unwrap();
        let state = condense(&mut sys, &set, &[0.0]).unwrap();

        let area = width * width;
        let analytic = l1 / area + l2 / area; // E = 1
        let w_aa = state.w_aa()[(0, 0)];
        let rel = (w_aa - analytic).abs() / analytic;
        assert!(rel < 0.05, "W_aa {w_aa} vs series {analytic} (rel {rel})");
    }

    #[test]
    fn w_is_symmetric_and_psd() {
        let mesh = build_box_mesh([2.0, 2.0, 6.0], [2, 2, 4]).unwrap();
        let fixed: Vec<usize> = (0..mesh.node_count())
            .filter(|&i| mesh.rest_nodes[i].z < 1e-9)
            .collect();
        let top = mesh.nearest_node(&nalgebra::Point3::new(1.0, 1.0, 6.0));
        let side = mesh.nearest_node(&nalgebra::Point3::new(2.0, 2.0, 6.0));
        let cables = vec![
            CableActuator {
                via_nodes: vec![side],
                pull_anchor: Some([2.0, 2.0, 0.0]),
                lambda_bounds: [0.0, 5.0],
                delta_bounds: [0.0, 2.0],
            },
            CableActuator {
                via_nodes: vec![top],
                pull_anchor: Some([0.0, 0.0, -2.0]),
                lambda_bounds: [0.0, 5.0],
                delta_bounds: [0.0, 2.0],
            },
        ];
        let effectors = vec![Effector { point: EffectorPoint::Node { node: top }, goal: [1.0, 1.0, 6.0] }];
        let mut sys = FemSystem::new(
            mesh.clone(),
            Material::new(5.0, 0.3, 0.0).unwrap(),
            &fixed,
            Vector3::zeros(),
            cables.clone(),
        )
        .unwrap();
        sys.solve_with_actuation(&[0.3, 0.15]).unwrap();

        let set = ConstraintSet::new(cables, effectors, &mesh).unwrap();
        let state = condense(&mut sys, &set, &[0.3, 0.15]).unwrap();

        assert_eq!(state.dim(), 5);
        assert!(state.asymmetry() <= 1e-8, "asymmetry {}", state.asymmetry());

        let sym = (&state.w + state.w.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let w_norm = state.w.norm();
        for &ev in eig.eigenvalues.iter() {
            assert!(ev >= -1e-9 * w_norm, "eigenvalue {ev} vs norm {w_norm}");
        }
        for i in 0..state.dim() {
            assert!(state.w[(i, i)] > 0.0, "diagonal {i}");
        }
    }

    #[test]
    fn identical_rows_give_identical_compliance() {
        // Pull-in row of a cable anchored straight above a node equals the
        // effector z-row at that node, so the W entries coincide and the
        // co-located 1-D direct Jacobian is 1.
        let mesh = build_box_mesh([1.0, 1.0, 4.0], [1, 1, 4]).unwrap();
        let fixed: Vec<usize> = (0..mesh.node_count())
            .filter(|&i| mesh.rest_nodes[i].z < 1e-9)
            .collect();
        let tip = mesh.nearest_node(&nalgebra::Point3::new(0.0, 0.0, 4.0));
        let cable = CableActuator {
            via_nodes: vec![tip],
            pull_anchor: Some([0.0, 0.0, 9.0]), // straight above: row = +z
            lambda_bounds: [0.0, 1.0],
            delta_bounds: [-1.0, 1.0],
        };
        let effector = Effector { point: EffectorPoint::Node { node: tip }, goal: [0.0, 0.0, 4.0] };
        let mut sys = FemSystem::new(
            mesh.clone(),
            Material::new(1.0, 0.2, 0.0).unwrap(),
            &fixed,
            Vector3::zeros(),
            vec![cable.clone()],
        )
        .unwrap();
        let set = ConstraintSet::new(vec![cable], vec![effector], &mesh).unwrap();
        let state = condense(&mut sys, &set, &[0.0]).unwrap();

        let w_ea_z = state.w_ea()[(2, 0)];
        let w_aa = state.w_aa()[(0, 0)];
        assert!((w_ea_z - w_aa).abs() <= 1e-12 * w_aa.abs());

        let j = direct_jacobian(&state).unwrap();
        assert_eq!(j.nrows(), 3);
        assert_eq!(j.ncols(), 1);
        assert!((j[(2, 0)] - 1.0).abs() < 1e-9, "J_z = {}", j[(2, 0)]);
    }

    #[test]
    fn dimension_is_mesh_independent() {
        for res in [[1, 1, 2], [2, 2, 4]] {
            let mesh = build_box_mesh([1.0, 1.0, 3.0], res).unwrap();
            let fixed: Vec<usize> = (0..mesh.node_count())
                .filter(|&i| mesh.rest_nodes[i].z < 1e-9)
                .collect();
            let tip = mesh.nearest_node(&nalgebra::Point3::new(0.5, 0.5, 3.0));
            let cable = CableActuator {
                via_nodes: vec![tip],
                pull_anchor: Some([0.5, 0.5, -1.0]),
                lambda_bounds: [0.0, 1.0],
                delta_bounds: [0.0, 1.0],
            };
            let effector =
                Effector { point: EffectorPoint::Node { node: tip }, goal: [0.5, 0.5, 3.0] };
            let mut sys = FemSystem::new(
                mesh.clone(),
                Material::new(1.0, 0.3, 0.0).unwrap(),
                &fixed,
                Vector3::zeros(),
                vec![cable.clone()],
            )
            .unwrap();
            let set = ConstraintSet::new(vec![cable], vec![effector], &mesh).unwrap();
            let state = condense(&mut sys, &set, &[0.0]).unwrap();
            assert_eq!(state.dim(), 4);
        }
    }

    #[test]
    fn compliance_linearization_error_falls_off() {
        // FEM-measured effector response to a tension perturbation approaches
        // W_ea * dlambda at first order.
        let mesh = build_box_mesh([2.0, 2.0, 6.0], [1, 1, 3]).unwrap();
        let fixed: Vec<usize> = (0..mesh.node_count())
            .filter(|&i| mesh.rest_nodes[i].z < 1e-9)
            .collect();
        let tip = mesh.nearest_node(&nalgebra::Point3::new(2.0, 2.0, 6.0));
        let cable = CableActuator {
            via_nodes: vec![tip],
            pull_anchor: Some([3.0, 3.0, 0.0]),
            lambda_bounds: [0.0, 10.0],
            delta_bounds: [0.0, 3.0],
        };
        let effector = Effector { point: EffectorPoint::Node { node: tip }, goal: [2.0, 2.0, 6.0] };
        let mut sys = FemSystem::new(
            mesh.clone(),
            Material::new(5.0, 0.3, 0.0).unwrap(),
            &fixed,
            Vector3::zeros(),
            vec![cable.clone()],
        )
        .unwrap();
        let set = ConstraintSet::new(vec![cable.clone()], vec![effector.clone()], &mesh).unwrap();

        let lambda0 = 0.15;
        sys.solve_with_actuation(&[lambda0]).unwrap();
        let e0 = effector.position(sys.positions(), &sys.mesh);
        let state = condense(&mut sys, &set, &[lambda0]).unwrap();
        let w_ea = state.w_ea();

        let error_at = |dl: f64| -> f64 {
            let mut sys2 = FemSystem::new(
                mesh.clone(),
                Material::new(5.0, 0.3, 0.0).unwrap(),
                &fixed,
                Vector3::zeros(),
                vec![cable.clone()],
            )
            .unwrap();
            sys2.solve_with_actuation(&[lambda0 + dl]).unwrap();
            let e1 = effector.position(sys2.positions(), &sys2.mesh);
            let measured = e1 - e0;
            let predicted = nalgebra::Vector3::new(w_ea[(0, 0)], w_ea[(1, 0)], w_ea[(2, 0)]) * dl;
            (measured - predicted).norm()
        };

        let e_big = error_at(0.06);
        let e_small = error_at(0.03);
        // Second-order falloff: halving the perturbation cuts the error by
        // roughly four; demand at least a factor of two.
        assert!(
            e_small <= 0.6 * e_big,
            "linearization errors {e_big} -> {e_small} do not fall off"
        );
    }
}

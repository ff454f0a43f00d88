//! Corotational linear-elastic tetrahedra and quasi-static Newton solves.
//!
//! The element model is corotated linear elasticity: per-element rotation R
//! from the polar decomposition of the deformation gradient F, energy
//! `V * (mu*||S - I||^2 + lambda/2 * tr(S - I)^2)` with `S = R^T F`. Internal
//! forces are the exact energy gradient and the assembled tangent includes the
//! rotation derivative, so finite-difference checks of K hold to first order
//! at any state, not just at rest.
//!
//! Solves are deterministic: fixed iteration order, no data races, and the
//! same inputs produce bit-identical equilibria.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::constraints::CableActuator;
use crate::error::{Error, Result};
use crate::mesh::TetMesh;
use crate::sparse::{reverse_cuthill_mckee, SkylineMatrix};

/// Isotropic material; pressure units are abstract MPa to pair with
/// millimeter lengths and Newton forces.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Material {
    pub young_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
}

impl Material {
    pub fn new(young_modulus: f64, poisson_ratio: f64, density: f64) -> Result<Self> {
        if !(young_modulus > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "young_modulus must be > 0, got {young_modulus}"
            )));
        }
        if !(0.0..0.5).contains(&poisson_ratio) {
            return Err(Error::InvalidArgument(format!(
                "poisson_ratio must be in [0, 0.5), got {poisson_ratio}"
            )));
        }
        if density < 0.0 {
            return Err(Error::InvalidArgument("density must be >= 0".into()));
        }
        Ok(Material { young_modulus, poisson_ratio, density })
    }

    /// Lame parameters (lambda, mu).
    pub fn lame(&self) -> (f64, f64) {
        let e = self.young_modulus;
        let nu = self.poisson_ratio;
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        (lambda, mu)
    }
}

/// Newton solve parameters. Residuals are measured relative to
/// `1 + ||applied forces||`.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-6, max_iters: 50 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonReport {
    pub iters: usize,
    pub residual: f64,
    pub force_scale: f64,
}

#[derive(Clone)]
struct Element {
    nodes: [usize; 4],
    /// Shape-function gradients at rest, `grads[a] = grad N_a`.
    grads: [Vector3<f64>; 4],
    volume: f64,
}

/// State needed to evaluate forces and tangents of one element.
struct ElementState {
    rotation: Matrix3<f64>,
    stretch_trace: f64,
    /// Inverse of `tr(S) I - S`, for the rotation derivative.
    g_inv: Matrix3<f64>,
    piola: Matrix3<f64>,
}

/// Assembled quasi-static system for one robot body.
#[derive(Clone)]
pub struct FemSystem {
    pub mesh: TetMesh,
    pub material: Material,
    pub gravity: Vector3<f64>,
    cables: Vec<CableActuator>,
    elements: Vec<Element>,
    /// Current node positions, flat `3n`.
    x: DVector<f64>,
    fixed: Vec<bool>,
    stiffness: SkylineMatrix,
    /// Gravity loads (dead load, constant).
    f_gravity: DVector<f64>,
    /// Additional applied nodal loads (tip loads, coupling forces).
    f_point: DVector<f64>,
    /// Cached internal (restoring) forces from the last `assemble`.
    f_int: DVector<f64>,
    pub newton: NewtonOptions,
}

fn cross_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

impl FemSystem {
    pub fn new(
        mesh: TetMesh,
        material: Material,
        fixed_nodes: &[usize],
        gravity: Vector3<f64>,
        cables: Vec<CableActuator>,
    ) -> Result<Self> {
        mesh.validate()?;
        for (i, c) in cables.iter().enumerate() {
            c.validate(&mesh)
                .map_err(|e| Error::InvalidArgument(format!("cable {i}: {e}")))?;
        }

        let n = mesh.node_count();
        let mut fixed = vec![false; 3 * n];
        for &node in fixed_nodes {
            if node >= n {
                return Err(Error::InvalidArgument(format!("fixed node {node} out of range")));
            }
            for c in 0..3 {
                fixed[3 * node + c] = true;
            }
        }

        // Element precomputation.
        let mut elements = Vec::with_capacity(mesh.tets.len());
        for (t, tet) in mesh.tets.iter().enumerate() {
            let p: Vec<Vector3<f64>> = tet.iter().map(|&i| mesh.rest_nodes[i].coords).collect();
            let dm = Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
            let det = dm.determinant();
            if det <= 0.0 {
                return Err(Error::Mesh(format!("tet {t}: non-positive rest volume")));
            }
            let dm_inv = dm.try_inverse().ok_or_else(|| {
                Error::Mesh(format!("tet {t}: singular rest shape matrix"))
            })?;
            let g1 = Vector3::new(dm_inv[(0, 0)], dm_inv[(0, 1)], dm_inv[(0, 2)]);
            let g2 = Vector3::new(dm_inv[(1, 0)], dm_inv[(1, 1)], dm_inv[(1, 2)]);
            let g3 = Vector3::new(dm_inv[(2, 0)], dm_inv[(2, 1)], dm_inv[(2, 2)]);
            elements.push(Element {
                nodes: *tet,
                grads: [-(g1 + g2 + g3), g1, g2, g3],
                volume: det / 6.0,
            });
        }

        // Node graph: mesh edges plus cable couplings, then RCM for the profile.
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        let push_edge = |adjacency: &mut Vec<Vec<usize>>, a: usize, b: usize| {
            if !adjacency[a].contains(&b) {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        };
        for tet in &mesh.tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    push_edge(&mut adjacency, tet[i], tet[j]);
                }
            }
        }
        for c in &cables {
            for w in c.via_nodes.windows(2) {
                push_edge(&mut adjacency, w[0], w[1]);
            }
        }
        for a in adjacency.iter_mut() {
            a.sort_unstable();
        }
        let perm = reverse_cuthill_mckee(&adjacency);
        let stiffness = SkylineMatrix::for_node_graph(&adjacency, &perm);

        // Lumped gravity: a quarter of each element's weight per vertex.
        let mut f_gravity = DVector::zeros(3 * n);
        for e in &elements {
            let w = material.density * e.volume / 4.0;
            for &node in &e.nodes {
                for c in 0..3 {
                    f_gravity[3 * node + c] += w * gravity[c];
                }
            }
        }

        let x = DVector::from_iterator(
            3 * n,
            mesh.rest_nodes.iter().flat_map(|p| [p.x, p.y, p.z]),
        );

        Ok(FemSystem {
            mesh,
            material,
            gravity,
            cables,
            elements,
            x,
            fixed,
            stiffness,
            f_gravity,
            f_point: DVector::zeros(3 * n),
            f_int: DVector::zeros(3 * n),
            newton: NewtonOptions::default(),
        })
    }

    pub fn positions(&self) -> &[f64] {
        self.x.as_slice()
    }

    pub fn set_positions(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.x.len());
        self.x.as_mut_slice().copy_from_slice(x);
    }

    pub fn reset_to_rest(&mut self) {
        for (i, p) in self.mesh.rest_nodes.iter().enumerate() {
            self.x[3 * i] = p.x;
            self.x[3 * i + 1] = p.y;
            self.x[3 * i + 2] = p.z;
        }
    }

    pub fn cables(&self) -> &[CableActuator] {
        &self.cables
    }

    pub fn fixed_dofs(&self) -> &[bool] {
        &self.fixed
    }

    pub fn dof_count(&self) -> usize {
        self.x.len()
    }

    /// Characteristic length: bounding-box diagonal of the rest shape.
    pub fn mesh_size(&self) -> f64 {
        let (lo, hi) = self.mesh.bounding_box();
        (hi - lo).norm()
    }

    /// Sets the extra applied load on a node (replacing any previous value).
    pub fn set_point_load(&mut self, node: usize, force: Vector3<f64>) {
        for c in 0..3 {
            self.f_point[3 * node + c] = force[c];
        }
    }

    pub fn clear_point_loads(&mut self) {
        self.f_point.fill(0.0);
    }

    pub fn external_forces(&self) -> DVector<f64> {
        &self.f_gravity + &self.f_point
    }

    fn element_state(&self, e: &Element, index: usize, x: &[f64]) -> Result<ElementState> {
        let p: Vec<Vector3<f64>> = e
            .nodes
            .iter()
            .map(|&i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
            .collect();
        let mut f = Matrix3::zeros();
        for a in 0..4 {
            f += p[a] * e.grads[a].transpose();
        }
        let det = f.determinant();
        if det <= 0.0 {
            return Err(Error::ElementInverted { tet: index, volume: det * e.volume });
        }

        let svd = f.svd(true, true);
        let u = svd.u.expect("svd with u");
        let v_t = svd.v_t.expect("svd with v_t");
        let rotation = u * v_t;
        let stretch = rotation.transpose() * f;
        let s_sym = (stretch + stretch.transpose()) * 0.5;
        let tr_s = s_sym.trace();

        let g = Matrix3::identity() * tr_s - s_sym;
        let g_inv = g
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("degenerate stretch in tet {index}")))?;

        let (lambda, mu) = self.material.lame();
        let piola = (f - rotation) * (2.0 * mu) + rotation * (lambda * (tr_s - 3.0));

        Ok(ElementState { rotation, stretch_trace: tr_s, g_inv, piola })
    }

    /// Elastic restoring forces `-dE/dx` at positions `x`.
    pub fn elastic_forces(&self, x: &[f64]) -> Result<DVector<f64>> {
        let mut f = DVector::zeros(x.len());
        for (t, e) in self.elements.iter().enumerate() {
            let st = self.element_state(e, t, x)?;
            for a in 0..4 {
                let fa = st.piola * e.grads[a] * (-e.volume);
                for c in 0..3 {
                    f[3 * e.nodes[a] + c] += fa[c];
                }
            }
        }
        Ok(f)
    }

    /// Corotational strain energy at positions `x`.
    pub fn elastic_energy(&self, x: &[f64]) -> Result<f64> {
        let (lambda, mu) = self.material.lame();
        let mut energy = 0.0;
        for (t, e) in self.elements.iter().enumerate() {
            let st = self.element_state(e, t, x)?;
            // ||S - I||^2 recovered from the Piola relation would be indirect;
            // recompute the stretch explicitly.
            let p: Vec<Vector3<f64>> = e
                .nodes
                .iter()
                .map(|&i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
                .collect();
            let mut fgrad = Matrix3::zeros();
            for a in 0..4 {
                fgrad += p[a] * e.grads[a].transpose();
            }
            let s = st.rotation.transpose() * fgrad;
            let s_minus_i = s - Matrix3::identity();
            let dev: f64 = s_minus_i.iter().map(|v| v * v).sum();
            let tr = st.stretch_trace - 3.0;
            energy += e.volume * (mu * dev + 0.5 * lambda * tr * tr);
        }
        Ok(energy)
    }

    /// 12x12 element tangent (exact Hessian of the corotational energy,
    /// symmetrized to kill roundoff asymmetry).
    fn element_tangent(&self, e: &Element, st: &ElementState) -> DMatrix<f64> {
        let (lambda, mu) = self.material.lame();
        let kappa = lambda * (st.stretch_trace - 3.0) - 2.0 * mu;
        let r = &st.rotation;

        let mut ke = DMatrix::<f64>::zeros(12, 12);
        for b in 0..4 {
            let gb = e.grads[b];
            for c in 0..3 {
                // dF = e_c (x) g_b
                let rc = Vector3::new(r[(c, 0)], r[(c, 1)], r[(c, 2)]); // R^T e_c
                let w = st.g_inv * gb.cross(&rc);
                let dr = r * cross_matrix(&w);

                // dP = 2 mu dF + lambda tr(R^T dF) R + kappa dR
                let trace_term = lambda * rc.dot(&gb);
                for a in 0..4 {
                    let ga = e.grads[a];
                    // dP * g_a, with dF * g_a = e_c * (g_b . g_a)
                    let mut df_a = dr * ga * kappa + rc_scale(r, trace_term, &ga);
                    df_a[c] += 2.0 * mu * gb.dot(&ga);
                    for d in 0..3 {
                        ke[(3 * a + d, 3 * b + c)] += e.volume * df_a[d];
                    }
                }
            }
        }

        // Exact Hessians are symmetric; enforce it bitwise.
        for i in 0..12 {
            for j in (i + 1)..12 {
                let v = 0.5 * (ke[(i, j)] + ke[(j, i)]);
                ke[(i, j)] = v;
                ke[(j, i)] = v;
            }
        }
        ke
    }

    /// Assembles the elastic tangent K and caches internal forces at the
    /// current positions. Fixed DOFs get identity rows/columns.
    pub fn assemble(&mut self) -> Result<()> {
        self.assemble_with_cable_tension(&[])
    }

    /// Assembles K plus the geometric stiffness of tensioned cables.
    /// `lambda` is empty (no actuation) or one tension per cable.
    pub fn assemble_with_cable_tension(&mut self, lambda: &[f64]) -> Result<()> {
        let x = self.x.clone();
        self.stiffness.reset();

        for (t, e) in self.elements.iter().enumerate() {
            let st = self.element_state(e, t, x.as_slice())?;
            let ke = self.element_tangent(e, &st);
            for p in 0..12 {
                let gi = 3 * e.nodes[p / 3] + p % 3;
                if self.fixed[gi] {
                    continue;
                }
                for q in p..12 {
                    let gj = 3 * e.nodes[q / 3] + q % 3;
                    if self.fixed[gj] {
                        continue;
                    }
                    self.stiffness.add(gi, gj, ke[(p, q)]);
                }
            }
        }

        if !lambda.is_empty() {
            debug_assert_eq!(lambda.len(), self.cables.len());
            for (i, cable) in self.cables.iter().enumerate() {
                if lambda[i] == 0.0 {
                    continue;
                }
                for (a, b, m) in cable.length_hessian(x.as_slice(), i)? {
                    for rc in 0..3 {
                        for cc in 0..3 {
                            let gi = 3 * a + rc;
                            let gj = 3 * b + cc;
                            if self.fixed[gi] || self.fixed[gj] {
                                continue;
                            }
                            if a == b && gj < gi {
                                continue; // diagonal block: upper triangle once
                            }
                            self.stiffness.add(gi, gj, lambda[i] * m[(rc, cc)]);
                        }
                    }
                }
            }
        }

        for (dof, &is_fixed) in self.fixed.iter().enumerate() {
            if is_fixed {
                self.stiffness.set_diag(dof, 1.0);
            }
        }

        self.f_int = self.elastic_forces(x.as_slice())?;
        Ok(())
    }

    /// Internal forces cached by the last `assemble`.
    pub fn internal_forces(&self) -> &DVector<f64> {
        &self.f_int
    }

    pub fn factor(&mut self) -> Result<()> {
        self.stiffness.factor()
    }

    /// Assembles and factors the Newton matrix at the current positions with
    /// a diagonal shift `tau`, escalating the shift while the tangent is
    /// indefinite (states beyond a buckling load). Returns the shift that
    /// factored. The equilibrium is still certified by the residual, so
    /// damping never changes a solution.
    fn assemble_and_factor_damped(&mut self, lambda: &[f64], tau_start: f64) -> Result<f64> {
        let scale = {
            self.assemble_with_cable_tension(lambda)?;
            self.stiffness.max_diag().max(1e-300)
        };
        let mut tau = tau_start;
        for _ in 0..12 {
            self.assemble_with_cable_tension(lambda)?;
            if tau > 0.0 {
                self.stiffness.shift_diagonal(tau);
            }
            match self.stiffness.factor() {
                Ok(()) => return Ok(tau),
                Err(Error::Factorization { .. }) => {
                    tau = if tau == 0.0 { 1e-8 * scale } else { tau * 100.0 };
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::Factorization { dof: 0, pivot: -tau })
    }

    pub fn is_factored(&self) -> bool {
        self.stiffness.is_factored()
    }

    /// Solves `K y = rhs` with the current factorization; fixed DOFs of the
    /// right-hand side are zeroed so they never contribute compliance.
    pub fn solve_linear(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = rhs.to_vec();
        for (dof, &is_fixed) in self.fixed.iter().enumerate() {
            if is_fixed {
                b[dof] = 0.0;
            }
        }
        self.stiffness.solve(&b)
    }

    /// Dense elastic tangent for small systems (tests and diagnostics).
    pub fn dense_stiffness(&self) -> Result<DMatrix<f64>> {
        let n = self.x.len();
        let mut k = DMatrix::zeros(n, n);
        for (t, e) in self.elements.iter().enumerate() {
            let st = self.element_state(e, t, self.x.as_slice())?;
            let ke = self.element_tangent(e, &st);
            for p in 0..12 {
                let gi = 3 * e.nodes[p / 3] + p % 3;
                for q in 0..12 {
                    let gj = 3 * e.nodes[q / 3] + q % 3;
                    if self.fixed[gi] || self.fixed[gj] {
                        continue;
                    }
                    k[(gi, gj)] += ke[(p, q)];
                }
            }
        }
        for (dof, &is_fixed) in self.fixed.iter().enumerate() {
            if is_fixed {
                k[(dof, dof)] = 1.0;
            }
        }
        Ok(k)
    }

    /// Nodal forces of the cable tensions at state `x`: `H_a^T lambda`.
    pub fn actuation_forces(&self, x: &[f64], lambda: &[f64]) -> Result<DVector<f64>> {
        let mut f = DVector::zeros(x.len());
        for (i, cable) in self.cables.iter().enumerate() {
            if lambda[i] == 0.0 {
                continue;
            }
            for (node, g) in cable.pull_in_jacobian(x, i)? {
                for c in 0..3 {
                    f[3 * node + c] += lambda[i] * g[c];
                }
            }
        }
        Ok(f)
    }

    /// Out-of-balance force at `x` under cable tensions `lambda`
    /// (zero on fixed DOFs), plus the applied-force scale.
    fn residual(&self, x: &[f64], lambda: &[f64]) -> Result<(DVector<f64>, f64)> {
        let f_app = self.external_forces() + self.actuation_forces(x, lambda)?;
        let scale = 1.0 + f_app.norm();
        let mut r = f_app + self.elastic_forces(x)?;
        for (dof, &is_fixed) in self.fixed.iter().enumerate() {
            if is_fixed {
                r[dof] = 0.0;
            }
        }
        Ok((r, scale))
    }

    /// Newton solve of the unactuated equilibrium (the anchor state).
    pub fn solve_free(&mut self) -> Result<NewtonReport> {
        let zeros = vec![0.0; self.cables.len()];
        self.solve_with_actuation(&zeros)
    }

    /// Newton solve of the equilibrium under cable force intensities
    /// `lambda`, with the cable term recomputed from the current geometry at
    /// every iteration. Falls back to a ramped load path when the full load
    /// does not converge directly.
    pub fn solve_with_actuation(&mut self, lambda: &[f64]) -> Result<NewtonReport> {
        if lambda.len() != self.cables.len() {
            return Err(Error::Dimension(format!(
                "expected {} cable tensions, got {}",
                self.cables.len(),
                lambda.len()
            )));
        }
        for (i, (&l, c)) in lambda.iter().zip(&self.cables).enumerate() {
            if l < c.lambda_bounds[0] - 1e-9 || l > c.lambda_bounds[1] + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "tension {l} of cable {i} outside bounds {:?}",
                    c.lambda_bounds
                )));
            }
        }

        let start = self.x.clone();
        let mut last_err = None;
        for substeps in [1usize, 4, 16, 64] {
            self.x.copy_from(&start);
            let mut result = Err(Error::Numeric("empty load path".into()));
            'ramp: for k in 1..=substeps {
                let frac = k as f64 / substeps as f64;
                let step: Vec<f64> = lambda.iter().map(|l| l * frac).collect();
                match self.newton_actuated(&step) {
                    Ok(rep) => result = Ok(rep),
                    Err(e) => {
                        last_err = Some(e);
                        result = Err(Error::Numeric("ramp step failed".into()));
                        break 'ramp;
                    }
                }
            }
            if let Ok(rep) = result {
                return Ok(rep);
            }
        }
        self.x.copy_from(&start);
        Err(last_err.unwrap_or_else(|| Error::Numeric("actuated solve failed".into())))
    }

    fn newton_actuated(&mut self, lambda: &[f64]) -> Result<NewtonReport> {
        let opts = self.newton;
        let mut x = self.x.clone();
        let (mut r, mut scale) = self.residual(x.as_slice(), lambda)?;
        let mut r_norm = r.norm();

        for iter in 0..=opts.max_iters {
            if r_norm <= opts.tol * scale {
                self.x = x;
                return Ok(NewtonReport { iters: iter, residual: r_norm, force_scale: scale });
            }
            if iter == opts.max_iters {
                break;
            }

            self.x.copy_from(&x);

            // Levenberg-style escalation: when the line search cannot improve
            // the residual (saddle plateaus near buckling branches), damp the
            // tangent harder and retry with a more gradient-like direction.
            let mut tau = 0.0;
            let mut accepted = None;
            for _ in 0..8 {
                tau = self.assemble_and_factor_damped(lambda, tau)?;
                let dx = self.solve_linear(r.as_slice());

                let mut alpha = 1.0;
                for _ in 0..20 {
                    let mut trial = x.clone();
                    for (t, &d) in trial.iter_mut().zip(dx.iter()) {
                        *t += alpha * d;
                    }
                    match self.residual(trial.as_slice(), lambda) {
                        Ok((rt, st)) => {
                            let nt = rt.norm();
                            if nt < r_norm * (1.0 - 1e-12) || nt <= opts.tol * st {
                                accepted = Some((trial, rt, st, nt));
                                break;
                            }
                        }
                        Err(Error::ElementInverted { .. }) => {} // shrink further
                        Err(e) => return Err(e),
                    }
                    alpha *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
                let diag_scale = self.stiffness.max_diag().max(1e-300);
                tau = if tau == 0.0 { 1e-6 * diag_scale } else { tau * 100.0 };
            }

            match accepted {
                Some((trial, rt, st, nt)) => {
                    x = trial;
                    r = rt;
                    scale = st;
                    r_norm = nt;
                }
                None => {
                    return Err(Error::NoConvergence {
                        iters: iter,
                        residual: r_norm,
                        tol: opts.tol * scale,
                    })
                }
            }
        }

        Err(Error::NoConvergence {
            iters: opts.max_iters,
            residual: r_norm,
            tol: opts.tol * scale,
        })
    }

    /// Displacement-controlled solve: drives each cable's pull-in displacement
    /// to `targets`, treating the tensions as Lagrange multipliers. Cables
    /// whose multiplier would turn negative go slack (lambda = 0) and their
    /// displacement is released, so the unilateral nature of cables is
    /// respected. Returns the tensions at equilibrium.
    pub fn solve_with_imposed_pull_ins(&mut self, targets: &[f64]) -> Result<(Vec<f64>, NewtonReport)> {
        let n_c = self.cables.len();
        if targets.len() != n_c {
            return Err(Error::Dimension(format!(
                "expected {n_c} pull-in targets, got {}",
                targets.len()
            )));
        }

        let start = self.x.clone();
        let from = self.pull_ins(start.as_slice());
        let mut last_err = None;
        for substeps in [1usize, 4, 16, 64] {
            self.x.copy_from(&start);
            let mut result = Err(Error::Numeric("empty target path".into()));
            'ramp: for k in 1..=substeps {
                let frac = k as f64 / substeps as f64;
                let step: Vec<f64> = from
                    .iter()
                    .zip(targets)
                    .map(|(f, t)| f + (t - f) * frac)
                    .collect();
                match self.imposed_pull_ins_active_set(&step) {
                    Ok(out) => result = Ok(out),
                    Err(e) => {
                        last_err = Some(e);
                        result = Err(Error::Numeric("ramp step failed".into()));
                        break 'ramp;
                    }
                }
            }
            if let Ok(out) = result {
                return Ok(out);
            }
        }
        self.x.copy_from(&start);
        Err(last_err.unwrap_or_else(|| Error::Numeric("imposed-displacement solve failed".into())))
    }

    fn imposed_pull_ins_active_set(&mut self, targets: &[f64]) -> Result<(Vec<f64>, NewtonReport)> {
        let n_c = self.cables.len();
        let opts = self.newton;
        let len_scale = self.mesh_size();
        let mut active: Vec<bool> = vec![true; n_c];
        let mut lambda = vec![0.0; n_c];
        let mut report = NewtonReport { iters: 0, residual: 0.0, force_scale: 1.0 };

        'outer: for _pass in 0..(2 * n_c + 2) {
            let mut converged = false;
            for iter in 0..opts.max_iters {
                let x = self.x.clone();
                let (r1, scale) = self.residual(x.as_slice(), &lambda)?;
                let pull = self.pull_ins(x.as_slice());
                let mut r2_norm: f64 = 0.0;
                for i in 0..n_c {
                    if active[i] {
                        r2_norm = r2_norm.max((pull[i] - targets[i]).abs());
                    }
                }
                let r1_norm = r1.norm();
                report = NewtonReport { iters: iter, residual: r1_norm, force_scale: scale };
                if r1_norm <= opts.tol * scale && r2_norm <= opts.tol * len_scale {
                    converged = true;
                    break;
                }
                let merit_prev = r1_norm / scale + r2_norm / len_scale;
                let active_ids: Vec<usize> = (0..n_c).filter(|&i| active[i]).collect();
                let m = active_ids.len();

                // Levenberg-style escalation, as in the force-controlled
                // solve: damp harder whenever no step improves the merit.
                let mut tau = 0.0;
                let mut taken = false;
                'attempts: for _ in 0..8 {
                    tau = self.assemble_and_factor_damped(&lambda, tau)?;

                    let y0 = self.solve_linear(r1.as_slice());
                    let mut dx = y0;
                    let mut dlam = DVector::<f64>::zeros(0);
                    if m > 0 {
                        // Columns K^{-1} H_i^T and the reduced system.
                        let mut rows = Vec::with_capacity(m);
                        for &i in &active_ids {
                            let mut h = vec![0.0; x.len()];
                            for (node, g) in self.cables[i].pull_in_jacobian(x.as_slice(), i)? {
                                for c in 0..3 {
                                    h[3 * node + c] = g[c];
                                }
                            }
                            rows.push(h);
                        }
                        let cols: Vec<Vec<f64>> = rows.iter().map(|h| self.solve_linear(h)).collect();

                        let mut w = DMatrix::<f64>::zeros(m, m);
                        let mut rhs = DVector::<f64>::zeros(m);
                        for (a, &i) in active_ids.iter().enumerate() {
                            for (b, col) in cols.iter().enumerate() {
                                w[(a, b)] = dot_free(&rows[a], col, &self.fixed);
                            }
                            rhs[a] = (targets[i] - pull[i]) - dot_free(&rows[a], &dx, &self.fixed);
                        }
                        dlam = w.clone().lu().solve(&rhs).ok_or_else(|| Error::Singular {
                            context: "imposed-displacement reduced system".into(),
                            cond: f64::INFINITY,
                        })?;
                        for (b, col) in cols.iter().enumerate() {
                            for (d, c) in dx.iter_mut().zip(col.iter()) {
                                *d += dlam[b] * c;
                            }
                        }
                    }

                    // Line search on a combined force/displacement merit.
                    let mut alpha = 1.0;
                    for _ in 0..20 {
                        let mut x_t = x.clone();
                        for (t, &d) in x_t.iter_mut().zip(dx.iter()) {
                            *t += alpha * d;
                        }
                        let mut lam_t = lambda.clone();
                        for (a, &i) in active_ids.iter().enumerate() {
                            lam_t[i] += alpha * dlam[a];
                        }
                        match self.residual(x_t.as_slice(), &lam_t) {
                            Ok((rt, st)) => {
                                let pull_t = self.pull_ins(x_t.as_slice());
                                let mut r2t: f64 = 0.0;
                                for i in 0..n_c {
                                    if active[i] {
                                        r2t = r2t.max((pull_t[i] - targets[i]).abs());
                                    }
                                }
                                let merit = rt.norm() / st + r2t / len_scale;
                                if merit < merit_prev * (1.0 - 1e-12) {
                                    self.x = x_t;
                                    lambda = lam_t;
                                    taken = true;
                                    break 'attempts;
                                }
                            }
                            Err(Error::ElementInverted { .. }) => {}
                            Err(e) => return Err(e),
                        }
                        alpha *= 0.5;
                    }
                    let diag_scale = self.stiffness.max_diag().max(1e-300);
                    tau = if tau == 0.0 { 1e-6 * diag_scale } else { tau * 100.0 };
                }
                if !taken {
                    return Err(Error::NoConvergence {
                        iters: iter,
                        residual: report.residual,
                        tol: opts.tol * report.force_scale,
                    });
                }
            }

            if !converged {
                return Err(Error::NoConvergence {
                    iters: opts.max_iters,
                    residual: report.residual,
                    tol: opts.tol * report.force_scale,
                });
            }

            // Unilateral adjustment: drop pushing cables, re-engage violated ones.
            let lam_tol = 1e-9 * (1.0 + report.force_scale);
            for i in 0..n_c {
                if active[i] && lambda[i] < -lam_tol {
                    active[i] = false;
                    lambda[i] = 0.0;
                    continue 'outer;
                }
            }
            let pull = self.pull_ins(self.x.clone().as_slice());
            for i in 0..n_c {
                if !active[i] && pull[i] < targets[i] - opts.tol * len_scale {
                    active[i] = true;
                    continue 'outer;
                }
            }
            // Clamp multiplier noise on the unilateral boundary.
            for l in lambda.iter_mut() {
                if *l < 0.0 {
                    *l = 0.0;
                }
            }
            return Ok((lambda, report));
        }

        Err(Error::NoConvergence {
            iters: opts.max_iters,
            residual: report.residual,
            tol: opts.tol,
        })
    }

    /// Pull-in displacements of all cables at positions `x`.
    pub fn pull_ins(&self, x: &[f64]) -> Vec<f64> {
        self.cables.iter().map(|c| c.pull_in(x, &self.mesh)).collect()
    }
}

#[inline]
fn dot_free(a: &[f64], b: &[f64], fixed: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        if !fixed[i] {
            s += a[i] * b[i];
        }
    }
    s
}

#[inline]
fn rc_scale(r: &Matrix3<f64>, factor: f64, g: &Vector3<f64>) -> Vector3<f64> {
    (r * g) * factor
}

//! Box-constrained quadratic programming for the inverse actuation problem.
//!
//! One primal active-set engine solves both the single-robot inverse problem
//! (minimize the effector shift subject to actuator course and effort boxes)
//! and the two-finger grasp problem after the coupling force has been
//! eliminated through the equality constraint. Solutions carry an active set
//! for warm starting and are certified by a KKT check that recomputes every
//! residual from the raw problem data.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};

/// One-sided linear constraint `a^T x >= b` with a printable label.
#[derive(Debug, Clone)]
struct OneSided {
    a: DVector<f64>,
    b: f64,
    label: String,
}

/// Dense strictly convex QP: `min 1/2 x^T Q x + g^T x` subject to one-sided
/// rows built from boxes on `x` and boxes on `A x`.
pub struct BoxQp {
    q: DMatrix<f64>,
    g: DVector<f64>,
    constraints: Vec<OneSided>,
    scale: f64,
}

/// Diagnostics emitted with every solve; serialized as one JSON record.
#[derive(Debug, Clone, Serialize)]
pub struct QpDiagnostics {
    pub kkt: f64,
    pub active_set: Vec<String>,
    pub iters: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the active one-sided constraints, aligned with
    /// `active_rows`.
    pub multipliers: Vec<f64>,
    pub active_rows: Vec<usize>,
    pub diagnostics: QpDiagnostics,
}

impl QpSolution {
    /// Active-set hint for the next solve.
    pub fn warm_start(&self) -> Vec<usize> {
        self.active_rows.clone()
    }
}

const FEAS_REL: f64 = 1e-10;

impl BoxQp {
    pub fn new(q: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        let n = g.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::Dimension(format!(
                "Q is {}x{}, g has length {n}",
                q.nrows(),
                q.ncols()
            )));
        }
        let mut scale: f64 = 1.0;
        for v in q.iter().chain(g.iter()) {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite QP data".into()));
            }
            scale = scale.max(v.abs());
        }
        // Strict convexity is the caller's responsibility (regularization);
        // reject clearly non-PSD data early.
        let eig = (&q + q.transpose()).scale(0.5).symmetric_eigen();
        let min_ev = eig.eigenvalues.min();
        if min_ev < -1e-10 * scale {
            return Err(Error::Numeric(format!(
                "QP Hessian not positive semidefinite (min eigenvalue {min_ev:.3e})"
            )));
        }
        Ok(BoxQp { q, g, constraints: Vec::new(), scale })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// Adds `lo <= x_i <= hi`. Infinite bounds are skipped.
    pub fn add_variable_box(&mut self, i: usize, lo: f64, hi: f64, name: &str) -> Result<()> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "empty box [{lo}, {hi}] on {name}"
            )));
        }
        let n = self.dim();
        if lo.is_finite() {
            let mut a = DVector::zeros(n);
            a[i] = 1.0;
            self.constraints.push(OneSided { a, b: lo, label: format!("{name}_lo:{i}") });
        }
        if hi.is_finite() {
            let mut a = DVector::zeros(n);
            a[i] = -1.0;
            self.constraints.push(OneSided { a, b: -hi, label: format!("{name}_hi:{i}") });
        }
        Ok(())
    }

    /// Adds `lo <= a^T x <= hi`.
    pub fn add_row_box(&mut self, a: DVector<f64>, lo: f64, hi: f64, name: &str) -> Result<()> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "empty box [{lo}, {hi}] on {name}"
            )));
        }
        if a.len() != self.dim() {
            return Err(Error::Dimension("constraint row length".into()));
        }
        for v in a.iter() {
            self.scale = self.scale.max(v.abs());
        }
        if lo.is_finite() {
            self.constraints
                .push(OneSided { a: a.clone(), b: lo, label: format!("{name}_lo") });
        }
        if hi.is_finite() {
            self.constraints
                .push(OneSided { a: -a, b: -hi, label: format!("{name}_hi") });
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.q * x)[(0, 0)] + self.g.dot(x)
    }

    fn residuals(&self, x: &DVector<f64>) -> Vec<f64> {
        self.constraints.iter().map(|c| c.a.dot(x) - c.b).collect()
    }

    /// Dual active-set solve (Goldfarb-Idnani). Starts from the unconstrained
    /// minimum and adds violated constraints one at a time, so no feasible
    /// starting point is needed and infeasibility surfaces as an unbounded
    /// dual step. Requires a strictly convex Hessian. `warm` biases which
    /// violated constraint is activated first; it can only change the
    /// iteration count, never the minimizer.
    ///
    /// All projector algebra runs in the Cholesky-transformed space
    /// `y = L^T x` where the Hessian is the identity; that halves the
    /// condition number the iteration sees, which matters when actuators
    /// outnumber effector DOFs and the regularization is tiny.
    pub fn solve(&self, warm: Option<&QpSolution>) -> Result<QpSolution> {
        let n = self.dim();
        let m = self.constraints.len();

        let chol = self
            .q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric(
                "QP Hessian is not strictly positive definite; add regularization".into(),
            ))?;
        let l = chol.l();
        let lt = l.transpose();

        // Transformed gradient and constraint normals.
        let g_t = l
            .solve_lower_triangular(&self.g)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        let normals_t: Vec<DVector<f64>> = self
            .constraints
            .iter()
            .map(|c| {
                l.solve_lower_triangular(&c.a)
                    .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))
            })
            .collect::<Result<_>>()?;

        // Objective in y-space: 1/2 ||y + g_t||^2 + const.
        let mut y = -g_t.clone();
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();

        // Thin QR of the active transformed normals: projector and multiplier
        // operator. Recomputed on change; the problems here are tiny.
        let mut q1 = DMatrix::<f64>::zeros(n, 0);
        let mut r_inv = DMatrix::<f64>::zeros(0, 0);
        let rebuild = |active: &[usize], q1: &mut DMatrix<f64>, r_inv: &mut DMatrix<f64>| -> Result<()> {
            let k = active.len();
            if k == 0 {
                *q1 = DMatrix::zeros(n, 0);
                *r_inv = DMatrix::zeros(0, 0);
                return Ok(());
            }
            let mut nmat = DMatrix::zeros(n, k);
            for (col, &row) in active.iter().enumerate() {
                nmat.set_column(col, &normals_t[row]);
            }
            let qr = nmat.qr();
            let r = qr.r();
            *q1 = qr.q();
            *r_inv = r.try_inverse().ok_or_else(|| Error::Numeric(
                "degenerate active set (dependent constraint normals)".into(),
            ))?;
            Ok(())
        };

        let feas_tol = FEAS_REL * self.scale;
        let hint: Vec<usize> = warm.map(|w| w.active_rows.clone()).unwrap_or_default();
        let max_iters = 50 * (m + 1) * (n + 1);
        let mut iters = 0usize;

        'outer: loop {
            iters += 1;
            if iters > max_iters {
                return Err(Error::Numeric(format!(
                    "dual active-set solver did not terminate in {max_iters} iterations"
                )));
            }

            // Pick the constraint to activate: hinted rows first, then the
            // most violated overall; ties broken by index.
            let res: Vec<f64> = (0..m)
                .map(|r| normals_t[r].dot(&y) - self.constraints[r].b)
                .collect();
            let pick = |candidates: &mut dyn Iterator<Item = usize>| -> Option<usize> {
                let mut best: Option<(f64, usize)> = None;
                for r in candidates {
                    if active.contains(&r) {
                        continue;
                    }
                    let s = res[r];
                    if s < -feas_tol && best.map_or(true, |(bs, bi)| s < bs || (s == bs && r < bi)) {
                        best = Some((s, r));
                    }
                }
                best.map(|(_, r)| r)
            };
            let p = pick(&mut hint.iter().copied()).or_else(|| pick(&mut (0..m)));
            let Some(p) = p else {
                // Primal and dual feasible: map back, polish, return.
                let x = lt
                    .solve_upper_triangular(&y)
                    .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
                return self.polish(x, active, u, iters);
            };

            let np = &normals_t[p];
            let bp = self.constraints[p].b;
            let mut up = 0.0f64;

            loop {
                // Projection of the new normal on the complement of the
                // active normals; its norm decides whether a primal step
                // exists.
                let coeffs = q1.transpose() * np;
                let z = np - &q1 * &coeffs;
                let r_vec = &r_inv * &coeffs;

                // Partial step: first active multiplier driven to zero.
                let mut t1 = f64::INFINITY;
                let mut k_drop = None;
                for idx in 0..active.len() {
                    if r_vec[idx] > 1e-13 {
                        let cand = u[idx] / r_vec[idx];
                        if cand < t1 {
                            t1 = cand;
                            k_drop = Some(idx);
                        }
                    }
                }

                // Full step: drive the violation of p to zero.
                let s = np.dot(&y) - bp;
                let zn = z.norm_squared();
                let t2 = if zn > 1e-24 * np.norm_squared().max(1e-300) {
                    -s / zn
                } else {
                    f64::INFINITY
                };

                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(Error::Infeasible(format!(
                        "constraint {} cannot be satisfied together with {{{}}}",
                        self.constraints[p].label,
                        active
                            .iter()
                            .map(|&r| self.constraints[r].label.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )));
                }

                if t2.is_finite() {
                    y += &z * t;
                }
                for (idx, ui) in u.iter_mut().enumerate() {
                    *ui -= t * r_vec[idx];
                }
                up += t;

                if t == t2 {
                    active.push(p);
                    u.push(up);
                    rebuild(&active, &mut q1, &mut r_inv)?;
                    continue 'outer;
                }

                // Partial step: drop the exhausted constraint and retry.
                let kd = k_drop.expect("finite t1 implies a drop candidate");
                active.remove(kd);
                u.remove(kd);
                rebuild(&active, &mut q1, &mut r_inv)?;
            }
        }
    }

    /// Re-solves the equality KKT system on the final active set with one
    /// step of iterative refinement, tightening stationarity and
    /// complementarity well below the certification threshold.
    fn polish(
        &self,
        x_gi: DVector<f64>,
        active: Vec<usize>,
        u_gi: Vec<f64>,
        iters: usize,
    ) -> Result<QpSolution> {
        let n = self.dim();
        let k = active.len();
        let mut best = (x_gi.clone(), u_gi.clone());

        if k <= n {
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.q);
            for (col, &r) in active.iter().enumerate() {
                for i in 0..n {
                    kkt[(i, n + col)] = -self.constraints[r].a[i];
                    kkt[(n + col, i)] = self.constraints[r].a[i];
                }
            }
            let mut rhs = DVector::zeros(n + k);
            for i in 0..n {
                rhs[i] = -self.g[i];
            }
            for (col, &r) in active.iter().enumerate() {
                rhs[n + col] = self.constraints[r].b;
            }
            let lu = kkt.clone().full_piv_lu();
            if let Some(mut sol) = lu.solve(&rhs) {
                // One refinement pass.
                let resid = &rhs - &kkt * &sol;
                if let Some(corr) = lu.solve(&resid) {
                    sol += corr;
                }
                let x_p = sol.rows(0, n).into_owned();
                let u_p: Vec<f64> = (0..k).map(|i| sol[n + i]).collect();
                // Accept only if primal feasibility and multiplier signs hold.
                let feas_ok = self
                    .residuals(&x_p)
                    .iter()
                    .all(|&s| s >= -FEAS_REL * self.scale);
                let dual_ok = u_p.iter().all(|&v| v >= -FEAS_REL * self.scale);
                if feas_ok && dual_ok {
                    best = (x_p, u_p);
                }
            }
        }

        let (x, u) = best;
        let diagnostics = self.kkt_check(&x, &active, &u, iters);
        Ok(QpSolution { x, multipliers: u, active_rows: active, diagnostics })
    }

    /// KKT residuals recomputed from the raw data: stationarity, primal and
    /// dual feasibility, complementarity. All normalized by the problem scale.
    pub fn kkt_check(&self, x: &DVector<f64>, active: &[usize], mu: &[f64], iters: usize) -> QpDiagnostics {
        let mut stat = &self.q * x + &self.g;
        for (&r, &m) in active.iter().zip(mu) {
            stat -= &self.constraints[r].a * m;
        }
        let stationarity = stat.amax();

        let mut primal: f64 = 0.0;
        for c in &self.constraints {
            primal = primal.max((c.b - c.a.dot(x)).max(0.0));
        }
        let mut dual: f64 = 0.0;
        let mut compl: f64 = 0.0;
        for (&r, &m) in active.iter().zip(mu) {
            dual = dual.max((-m).max(0.0));
            compl = compl.max((m * (self.constraints[r].a.dot(x) - self.constraints[r].b)).abs());
        }

        let kkt = (stationarity.max(primal).max(dual).max(compl)) / self.scale;
        QpDiagnostics {
            kkt,
            active_set: active.iter().map(|&r| self.constraints[r].label.clone()).collect(),
            iters,
            objective: self.objective(x),
        }
    }
}

/// Inverse-actuation problem data (one robot): minimize
/// `||W_ea lambda + delta_e_free||^2 + eps ||lambda||^2` subject to the
/// actuator effort box on `lambda` and the course box on
/// `W_aa lambda + delta_a_free`.
#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub w_ea: DMatrix<f64>,
    pub w_aa: DMatrix<f64>,
    pub delta_e_free: DVector<f64>,
    pub delta_a_free: DVector<f64>,
    pub lambda_bounds: Vec<[f64; 2]>,
    pub delta_bounds: Vec<[f64; 2]>,
    pub eps_reg: f64,
}

/// Default Tikhonov weight: `1e-9 * trace(W_ea^T W_ea)`, enough to make the
/// minimizer unique when actuators outnumber effector DOFs.
pub fn default_regularization(w_ea: &DMatrix<f64>) -> f64 {
    1e-9 * (w_ea.transpose() * w_ea).trace()
}

impl InverseProblem {
    pub fn validate(&self) -> Result<()> {
        let n_a = self.w_ea.ncols();
        if self.w_aa.nrows() != n_a
            || self.w_aa.ncols() != n_a
            || self.delta_a_free.len() != n_a
            || self.lambda_bounds.len() != n_a
            || self.delta_bounds.len() != n_a
            || self.delta_e_free.len() != self.w_ea.nrows()
        {
            return Err(Error::Dimension("inverse problem blocks disagree".into()));
        }
        if self.eps_reg < 0.0 {
            return Err(Error::InvalidArgument("eps_reg must be >= 0".into()));
        }
        for (i, b) in self.lambda_bounds.iter().chain(self.delta_bounds.iter()).enumerate() {
            if b[0] > b[1] {
                return Err(Error::InvalidArgument(format!("empty bound interval {i}")));
            }
        }
        Ok(())
    }

    fn build(&self) -> Result<BoxQp> {
        self.validate()?;
        let n_a = self.w_ea.ncols();
        let q = (self.w_ea.transpose() * &self.w_ea) * 2.0
            + DMatrix::identity(n_a, n_a) * (2.0 * self.eps_reg);
        let g = self.w_ea.transpose() * &self.delta_e_free * 2.0;
        let mut qp = BoxQp::new(q, g)?;
        for (i, b) in self.lambda_bounds.iter().enumerate() {
            qp.add_variable_box(i, b[0], b[1], "lambda")?;
        }
        for (i, b) in self.delta_bounds.iter().enumerate() {
            let row = self.w_aa.row(i).transpose();
            qp.add_row_box(
                row,
                b[0] - self.delta_a_free[i],
                b[1] - self.delta_a_free[i],
                &format!("delta:{i}"),
            )?;
        }
        Ok(qp)
    }
}

/// Solves the inverse problem, optionally warm-started from a previous step.
pub fn solve_inverse(problem: &InverseProblem, warm: Option<&QpSolution>) -> Result<QpSolution> {
    problem.build()?.solve(warm)
}

/// Per-finger blocks of the coupled grasp problem, all in world frame.
#[derive(Debug, Clone)]
pub struct FingerBlocks {
    pub w_ea: DMatrix<f64>,
    pub w_ee: nalgebra::Matrix3<f64>,
    pub lambda_prev: DVector<f64>,
    pub lambda_bounds: Vec<[f64; 2]>,
    pub effector_prev: Vector3<f64>,
}

/// Two fingers coupled through an equal/opposite force on their effectors,
/// holding a rigid offset `beta` between the effector positions.
#[derive(Debug, Clone)]
pub struct CoupledProblem {
    pub finger1: FingerBlocks,
    pub finger2: FingerBlocks,
    pub p_goal: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub lambda_e_prev: Vector3<f64>,
    /// Optional per-component bounds on the coupling force.
    pub lambda_e_bounds: Option<[[f64; 2]; 3]>,
    pub eps_reg: f64,
}

#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub lambda_1: DVector<f64>,
    pub lambda_2: DVector<f64>,
    pub lambda_e: Vector3<f64>,
    /// Effector positions predicted by the compliance update.
    pub p1_predicted: Vector3<f64>,
    pub p2_predicted: Vector3<f64>,
    /// `||P_e1 + beta - P_e2||` of the prediction.
    pub equality_residual: f64,
    pub diagnostics: QpDiagnostics,
}

/// Solves the coupled grasp QP by eliminating the coupling force through the
/// equality constraint `P_e1 + beta = P_e2` (three equations linear in
/// `lambda_e`), then running the active-set solver on the reduced problem in
/// the two tension vectors.
pub fn solve_coupled(problem: &CoupledProblem, warm: Option<&QpSolution>) -> Result<CoupledSolution> {
    let f1 = &problem.finger1;
    let f2 = &problem.finger2;
    let n1 = f1.w_ea.ncols();
    let n2 = f2.w_ea.ncols();
    if f1.lambda_prev.len() != n1 || f2.lambda_prev.len() != n2 {
        return Err(Error::Dimension("previous tensions disagree with W_ea".into()));
    }

    let coupling = f1.w_ee + f2.w_ee;
    let c_inv = coupling.try_inverse().ok_or_else(|| Error::Singular {
        context: "W_ee,1 + W_ee,2 coupling block".into(),
        cond: f64::INFINITY,
    })?;

    // Equality residual at the previous state.
    let r0 = f1.effector_prev + problem.beta - f2.effector_prev;

    // dlambda_e = -C^{-1} (r0 + W_ea1 dl1 - W_ea2 dl2) =: e0 + E1 dl1 + E2 dl2
    let e0 = -c_inv * r0;
    let e1 = -c_inv * &f1.w_ea;
    let e2 = c_inv * &f2.w_ea;

    // P1 = p1_prev + W_ea1 dl1 + W_ee1 dlambda_e = b0 + M1 dl1 + M2 dl2
    let b0 = f1.effector_prev + f1.w_ee * e0;
    let m1 = &f1.w_ea + f1.w_ee * &e1;
    let m2 = f1.w_ee * &e2;

    // Objective ||M z + (b0 - goal)||^2 + eps ||z||^2 over z = [dl1; dl2].
    let nz = n1 + n2;
    let mut m_full = DMatrix::zeros(3, nz);
    m_full.view_mut((0, 0), (3, n1)).copy_from(&m1);
    m_full.view_mut((0, n1), (3, n2)).copy_from(&m2);
    let resid0 = b0 - problem.p_goal;
    let q = (m_full.transpose() * &m_full) * 2.0 + DMatrix::identity(nz, nz) * (2.0 * problem.eps_reg);
    let g = m_full.transpose() * DVector::from_column_slice(resid0.as_slice()) * 2.0;

    let mut qp = BoxQp::new(q, g)?;
    for (i, b) in f1.lambda_bounds.iter().enumerate() {
        qp.add_variable_box(i, b[0] - f1.lambda_prev[i], b[1] - f1.lambda_prev[i], "lambda1")?;
    }
    for (i, b) in f2.lambda_bounds.iter().enumerate() {
        qp.add_variable_box(n1 + i, b[0] - f2.lambda_prev[i], b[1] - f2.lambda_prev[i], "lambda2")?;
    }
    if let Some(bounds) = problem.lambda_e_bounds {
        // lambda_e = lambda_e_prev + e0 + E1 dl1 + E2 dl2.
        for c in 0..3 {
            let mut row = DVector::zeros(nz);
            for i in 0..n1 {
                row[i] = e1[(c, i)];
            }
            for i in 0..n2 {
                row[n1 + i] = e2[(c, i)];
            }
            let base = problem.lambda_e_prev[c] + e0[c];
            qp.add_row_box(row, bounds[c][0] - base, bounds[c][1] - base, &format!("lambda_e:{c}"))?;
        }
    }

    let sol = qp.solve(warm)?;
    let dl1 = sol.x.rows(0, n1).into_owned();
    let dl2 = sol.x.rows(n1, n2).into_owned();
    let dlam_e = e0 + &e1 * &dl1 + &e2 * &dl2;

    let lambda_1 = &f1.lambda_prev + &dl1;
    let lambda_2 = &f2.lambda_prev + &dl2;
    let lambda_e = problem.lambda_e_prev + dlam_e;

    let p1 = f1.effector_prev + &f1.w_ea * &dl1 + f1.w_ee * dlam_e;
    let p2 = f2.effector_prev + &f2.w_ea * &dl2 - f2.w_ee * dlam_e;
    let equality_residual = (p1 + problem.beta - p2).norm();

    Ok(CoupledSolution {
        lambda_1,
        lambda_2,
        lambda_e,
        p1_predicted: p1,
        p2_predicted: p2,
        equality_residual,
        diagnostics: sol.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn simple_problem(
        w_ea: &[f64],
        rows: usize,
        cols: usize,
        delta_e_free: &[f64],
        lambda_bounds: Vec<[f64; 2]>,
    ) -> InverseProblem {
        let n = cols;
        InverseProblem {
            w_ea: DMatrix::from_row_slice(rows, cols, w_ea),
            w_aa: DMatrix::identity(n, n),
            delta_e_free: DVector::from_column_slice(delta_e_free),
            delta_a_free: DVector::zeros(n),
            lambda_bounds,
            delta_bounds: vec![[f64::NEG_INFINITY, f64::INFINITY]; n],
            eps_reg: 0.0,
        }
    }

    #[test]
    fn one_dof_interior_optimum() {
        // min (lambda - 2)^2 over [0, 10] -> lambda = 2.
        let p = simple_problem(&[1.0], 1, 1, &[-2.0], vec![[0.0, 10.0]]);
        let sol = solve_inverse(&p, None).unwrap();
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-10);
        assert!(sol.diagnostics.kkt <= 1e-8);
    }

    #[test]
    fn unilateral_boundary_optimum() {
        // delta_e_free pushes the wrong way; the cable cannot push.
        let p = simple_problem(&[1.0], 1, 1, &[3.0], vec![[0.0, 10.0]]);
        let sol = solve_inverse(&p, None).unwrap();
        assert_relative_eq!(sol.x[0], 0.0, epsilon = 1e-12);
        assert!(sol.diagnostics.active_set.iter().any(|l| l == "lambda_lo:0"));
        assert!(sol.diagnostics.kkt <= 1e-8);
    }

    #[test]
    fn zero_violation_gives_zero_actuation() {
        let mut p = simple_problem(&[1.0, 0.3, 0.3, 1.0], 2, 2, &[0.0, 0.0], vec![[0.0, 5.0]; 2]);
        p.eps_reg = 1e-6;
        let sol = solve_inverse(&p, None).unwrap();
        assert!(sol.x.amax() < 1e-12);
    }

    #[test]
    fn course_box_binds() {
        // Unconstrained optimum lambda = 4 but delta box caps W_aa lambda at 1.
        let mut p = simple_problem(&[1.0], 1, 1, &[-4.0], vec![[0.0, 10.0]]);
        p.delta_bounds = vec![[0.0, 1.0]];
        let sol = solve_inverse(&p, None).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert!(sol.diagnostics.active_set.iter().any(|l| l.starts_with("delta:0_hi")));
    }

    #[test]
    fn infeasible_boxes_are_reported() {
        // lambda in [0, 1] maps delta = lambda + 10 into [10, 11], but the
        // course box demands [0, 1].
        let mut p = simple_problem(&[1.0], 1, 1, &[-1.0], vec![[0.0, 1.0]]);
        p.delta_a_free = DVector::from_column_slice(&[10.0]);
        p.delta_bounds = vec![[0.0, 1.0]];
        match solve_inverse(&p, None) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("delta"), "{msg}"),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    fn random_instance(rng: &mut StdRng, n_a: usize, n_e_rows: usize) -> InverseProblem {
        let w_ea = DMatrix::from_fn(n_e_rows, n_a, |_, _| rng.random_range(-1.0..1.0));
        // SPD W_aa.
        let b = DMatrix::from_fn(n_a, n_a, |_, _| rng.random_range(-1.0..1.0));
        let w_aa = &b * b.transpose() + DMatrix::identity(n_a, n_a) * 0.5;
        let delta_e_free = DVector::from_fn(n_e_rows, |_, _| rng.random_range(-2.0..2.0));
        let delta_a_free = DVector::from_fn(n_a, |_, _| rng.random_range(-0.5..0.5));
        let lambda_bounds = (0..n_a)
            .map(|_| {
                let hi: f64 = rng.random_range(0.5..4.0);
                [0.0, hi]
            })
            .collect();
        let delta_bounds = (0..n_a)
            .map(|_| {
                let lo: f64 = rng.random_range(-6.0..-3.0);
                let hi: f64 = rng.random_range(3.0..8.0);
                [lo, hi]
            })
            .collect();
        InverseProblem {
            eps_reg: default_regularization(&w_ea).max(1e-12),
            w_ea,
            w_aa,
            delta_e_free,
            delta_a_free,
            lambda_bounds,
            delta_bounds,
        }
    }

    #[test]
    fn random_instances_pass_kkt() {
        let mut rng = StdRng::seed_from_u64(7);
        for k in 0..200 {
            let n_a = 1 + (k % 8);
            let p = random_instance(&mut rng, n_a, 3);
            let sol = solve_inverse(&p, None).unwrap();
            assert!(
                sol.diagnostics.kkt <= 1e-8,
                "instance {k}: kkt {}",
                sol.diagnostics.kkt
            );
        }
    }

    #[test]
    fn grid_search_oracle_small_instances() {
        let mut rng = StdRng::seed_from_u64(11);
        for k in 0..20 {
            let n_a = 1 + (k % 2); // 1 or 2 actuators keeps the grid exhaustive
            let p = random_instance(&mut rng, n_a, 3);
            let sol = solve_inverse(&p, None).unwrap();
            let qp = p.build().unwrap();
            let f_solver = qp.objective(&sol.x);

            // Exhaustive grid over the lambda box, filtered by the delta box.
            let steps = 101;
            let mut best = f64::INFINITY;
            let mut idx = vec![0usize; n_a];
            loop {
                let x = DVector::from_fn(n_a, |i, _| {
                    let [lo, hi] = p.lambda_bounds[i];
                    lo + (hi - lo) * idx[i] as f64 / (steps - 1) as f64
                });
                let delta = &p.w_aa * &x + &p.delta_a_free;
                let ok = (0..n_a).all(|i| {
                    delta[i] >= p.delta_bounds[i][0] - 1e-12 && delta[i] <= p.delta_bounds[i][1] + 1e-12
                });
                if ok {
                    best = best.min(qp.objective(&x));
                }
                // Odometer increment.
                let mut c = 0;
                loop {
                    idx[c] += 1;
                    if idx[c] < steps {
                        break;
                    }
                    idx[c] = 0;
                    c += 1;
                    if c == n_a {
                        break;
                    }
                }
                if c == n_a {
                    break;
                }
            }

            // The solver can only do better than the grid, up to grid error.
            let h: f64 = p
                .lambda_bounds
                .iter()
                .map(|b| (b[1] - b[0]) / (steps - 1) as f64)
                .fold(0.0, f64::max);
            let curvature = qp.q.amax();
            let grid_err = 0.5 * curvature * (h * h * n_a as f64) + qp.g.amax() * h * n_a as f64;
            assert!(
                f_solver <= best + 1e-9 * (1.0 + best.abs()),
                "instance {k}: solver {f_solver} worse than grid {best}"
            );
            assert!(
                best - f_solver <= grid_err,
                "instance {k}: grid best {best} vs solver {f_solver} beyond grid error {grid_err}"
            );
        }
    }

    #[test]
    fn objective_scaling_leaves_argmin_unchanged() {
        let mut rng = StdRng::seed_from_u64(3);
        let p = random_instance(&mut rng, 4, 3);
        let sol = solve_inverse(&p, None).unwrap();

        let c: f64 = 37.5;
        let scaled = InverseProblem {
            w_ea: &p.w_ea * c.sqrt(),
            delta_e_free: &p.delta_e_free * c.sqrt(),
            eps_reg: p.eps_reg * c,
            ..p.clone()
        };
        let sol2 = solve_inverse(&scaled, None).unwrap();
        assert!((&sol.x - &sol2.x).amax() < 1e-8, "{:?} vs {:?}", sol.x, sol2.x);
    }

    #[test]
    fn warm_start_never_changes_solution() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_instance(&mut rng, 5, 3);
            let cold = solve_inverse(&p, None).unwrap();
            let warm = solve_inverse(&p, Some(&cold)).unwrap();
            assert!((&cold.x - &warm.x).amax() <= 1e-9);
        }
    }

    fn toy_coupled(
        wee1: f64,
        wee2: f64,
        wea1: f64,
        wea2: f64,
        p1: f64,
        p2: f64,
        goal: f64,
        beta: f64,
    ) -> CoupledProblem {
        // 1-D problem embedded on the x axis; y/z blocks are identity.
        let mut wee_1 = nalgebra::Matrix3::identity();
        wee_1[(0, 0)] = wee1;
        let mut wee_2 = nalgebra::Matrix3::identity();
        wee_2[(0, 0)] = wee2;
        CoupledProblem {
            finger1: FingerBlocks {
                w_ea: DMatrix::from_row_slice(3, 1, &[wea1, 0.0, 0.0]),
                w_ee: wee_1,
                lambda_prev: DVector::zeros(1),
                lambda_bounds: vec![[-50.0, 50.0]],
                effector_prev: Vector3::new(p1, 0.0, 0.0),
            },
            finger2: FingerBlocks {
                w_ea: DMatrix::from_row_slice(3, 1, &[wea2, 0.0, 0.0]),
                w_ee: wee_2,
                lambda_prev: DVector::zeros(1),
                lambda_bounds: vec![[-50.0, 50.0]],
                effector_prev: Vector3::new(p2, 0.0, 0.0),
            },
            p_goal: Vector3::new(goal, 0.0, 0.0),
            beta: Vector3::new(beta, 0.0, 0.0),
            lambda_e_prev: Vector3::zeros(),
            lambda_e_bounds: None,
            eps_reg: 1e-9,
        }
    }

    #[test]
    fn coupled_toy_matches_hand_kkt() {
        // Unbounded 1-D coupled problem: the equality fixes
        // dlambda_e = -(r0 + w1 dl1 - w2 dl2)/C, and with the goal reachable
        // the optimum drives P1 exactly to the goal with minimal effort.
        let (wee1, wee2, wea1, wea2) = (2.0, 1.0, 1.5, 1.0);
        let (p1, p2, goal, beta) = (0.0, 0.5, 1.0, 0.25);
        let sol = solve_coupled(&toy_coupled(wee1, wee2, wea1, wea2, p1, p2, goal, beta), None).unwrap();

        // Hand solution: with eps -> 0, P1 = goal and the equality holds.
        assert_relative_eq!(sol.p1_predicted.x, goal, epsilon = 1e-4);
        assert!(sol.equality_residual <= 1e-8);

        // Verify the reconstruction equations hold exactly.
        let dl1 = sol.lambda_1[0];
        let dl2 = sol.lambda_2[0];
        let dle = sol.lambda_e.x;
        let p1_new = p1 + wea1 * dl1 + wee1 * dle;
        let p2_new = p2 + wea2 * dl2 - wee2 * dle;
        assert_relative_eq!(p1_new, sol.p1_predicted.x, epsilon = 1e-12);
        assert_relative_eq!(p2_new, sol.p2_predicted.x, epsilon = 1e-12);
        assert_relative_eq!(p1_new + beta, p2_new, epsilon = 1e-9);
    }

    #[test]
    fn coupled_symmetry_gives_equal_tensions() {
        // Mirror-symmetric fingers, goal on the symmetry plane.
        let sol = solve_coupled(&toy_coupled(1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 0.0, 2.0), None);
        // beta = 2 = p2 - p1 already: equality satisfied, goal at the
        // midpoint pulls both fingers identically.
        let sol = sol.unwrap();
        assert_relative_eq!(sol.lambda_1[0], sol.lambda_2[0], epsilon = 1e-6);
    }

    #[test]
    fn coupled_decouples_without_object() {
        // With beta matching the current gap and lambda_e forced to zero via
        // tight bounds, each finger solves its own inverse problem.
        let mut p = toy_coupled(1.0, 1.0, 1.0, 1.0, 0.0, 3.0, 1.0, 3.0);
        p.lambda_e_bounds = Some([[0.0, 0.0]; 3]);
        let sol = solve_coupled(&p, None).unwrap();
        assert!(sol.lambda_e.norm() <= 1e-9);
        // Finger 1 alone: min (p1 + dl1 - goal)^2 -> dl1 = 1. Finger 2 must
        // follow to keep the gap: p2 + dl2 = p1 + dl1 + beta -> dl2 = 1.
        assert_relative_eq!(sol.lambda_1[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(sol.lambda_2[0], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn coupled_singular_block_is_reported() {
        let mut p = toy_coupled(1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.5, 1.0);
        p.finger1.w_ee = nalgebra::Matrix3::zeros();
        p.finger2.w_ee = nalgebra::Matrix3::zeros();
        assert!(matches!(solve_coupled(&p, None), Err(Error::Singular { .. })));
    }
}

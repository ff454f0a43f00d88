//! Online control: condense (or predict) the compact mechanical
//! representation at the current state, solve the inverse QP, apply the
//! tensions in the FEM model, and repeat until an accuracy or stability
//! criterion holds.
//!
//! Two interchangeable modes drive the same loop. `Full` recomputes the
//! condensation at every step; `Learned` replaces exactly that computation
//! with the surrogate prediction, rebuilding the effector part of the free
//! violation from the current effector/goal geometry.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use serde::Serialize;

use crate::condense::{condense_with, CondensedState};
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::fem::FemSystem;
use crate::learn::SurrogateModel;
use crate::parallel::Parallelism;
use crate::qp::{
    default_regularization, solve_coupled, solve_inverse, CoupledProblem, FingerBlocks,
    InverseProblem, QpSolution,
};
use crate::robot::RobotModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Full,
    Learned,
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlMode::Full => write!(f, "full"),
            ControlMode::Learned => write!(f, "learned"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlConfig {
    pub mode: ControlMode,
    /// Goal tolerance in length units.
    pub tol_goal: f64,
    pub max_steps: usize,
    /// Tikhonov weight passed to the QP; `None` uses the per-state default.
    pub eps_reg: Option<f64>,
    /// Per-step actuation displacement clamp, as a fraction of each cable's
    /// course. Keeps the step inside the linearization's validity.
    pub step_alpha: f64,
    /// Stability threshold on the applied tension change.
    pub stability_tol: f64,
}

impl ControlConfig {
    pub fn new(mode: ControlMode, tol_goal: f64, max_steps: usize) -> Self {
        ControlConfig {
            mode,
            tol_goal,
            max_steps,
            eps_reg: None,
            step_alpha: 0.25,
            stability_tol: 1e-9,
        }
    }
}

/// One executed control step (append-only log entry).
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub goal: [f64; 3],
    pub effector: [f64; 3],
    pub err_norm: f64,
    pub delta_a: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mode: String,
    pub kkt: f64,
    pub qp_iters: usize,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GoalSummary {
    pub goal: [f64; 3],
    pub converged: bool,
    pub steps: usize,
    pub final_err: f64,
}

/// A control session owns its FEM system exclusively.
pub struct ControlSession {
    pub model: RobotModel,
    pub system: FemSystem,
    set: ConstraintSet,
    surrogate: Option<SurrogateModel>,
    pub config: ControlConfig,
    lambda: Vec<f64>,
    warm: Option<QpSolution>,
    stall: usize,
    step_counter: usize,
    pub records: Vec<StepRecord>,
}

impl ControlSession {
    /// Builds the session and solves the anchor (zero actuation) state.
    pub fn new(
        model: RobotModel,
        config: ControlConfig,
        surrogate: Option<SurrogateModel>,
    ) -> Result<Self> {
        if config.mode == ControlMode::Learned && surrogate.is_none() {
            return Err(Error::InvalidArgument(
                "learned mode needs a trained surrogate model".into(),
            ));
        }
        if let Some(s) = &surrogate {
            if s.n_actuators() != model.cable_count() {
                return Err(Error::Dimension(format!(
                    "surrogate has {} actuators, robot has {}",
                    s.n_actuators(),
                    model.cable_count()
                )));
            }
        }
        let mut system = model.build_system()?;
        system.solve_free()?;
        let set = model.constraint_set()?;
        let lambda = vec![0.0; model.cable_count()];
        Ok(ControlSession {
            model,
            system,
            set,
            surrogate,
            config,
            lambda,
            warm: None,
            stall: 0,
            step_counter: 0,
            records: Vec::new(),
        })
    }

    pub fn set_goals(&mut self, goals: &[Vector3<f64>]) -> Result<()> {
        if goals.len() != self.set.effectors.len() {
            return Err(Error::Dimension(format!(
                "{} goals for {} effectors",
                goals.len(),
                self.set.effectors.len()
            )));
        }
        for (e, g) in self.set.effectors.iter_mut().zip(goals) {
            e.goal = [g.x, g.y, g.z];
        }
        self.warm = None;
        self.stall = 0;
        Ok(())
    }

    pub fn effector_positions(&self) -> Vec<Vector3<f64>> {
        self.set
            .effectors
            .iter()
            .map(|e| e.position(self.system.positions(), &self.model.mesh))
            .collect()
    }

    pub fn goal_error(&self) -> f64 {
        DVector::from_vec(self.set.effector_violations(self.system.positions(), &self.model.mesh))
            .norm()
    }

    pub fn tensions(&self) -> &[f64] {
        &self.lambda
    }

    /// The inverse-problem blocks at the current state, per the session mode.
    fn problem_blocks(&mut self) -> Result<(InverseProblem, bool)> {
        let x = self.system.positions().to_vec();
        match self.config.mode {
            ControlMode::Full => {
                let lambda = self.lambda.clone();
                let state: CondensedState =
                    condense_with(&mut self.system, &self.set, &lambda, Parallelism::Auto)?;
                let w_ea = state.w_ea();

                // The effector free violation is rebuilt from the current
                // effector/goal geometry rather than taken at the fully
                // relaxed state: on soft robots the one-shot relax-and-reload
                // linearization leaves a bend-squared bias at the fixed
                // point, while the geometric form drives the measured
                // violation itself to zero. Both control modes share this
                // construction.
                let current = DVector::from_vec(self.set.effector_violations(&x, &self.model.mesh));
                let lambda_prev = DVector::from_column_slice(&self.lambda);
                let delta_e_free = &current - &w_ea * &lambda_prev;

                let eps = self.config.eps_reg.unwrap_or_else(|| default_regularization(&w_ea));
                Ok((
                    InverseProblem {
                        w_ea,
                        w_aa: state.w_aa(),
                        delta_e_free,
                        delta_a_free: state.delta_a_free.clone(),
                        lambda_bounds: self.model.lambda_bounds(),
                        delta_bounds: self.model.delta_bounds(),
                        eps_reg: eps,
                    },
                    false,
                ))
            }
            ControlMode::Learned => {
                let surrogate = self.surrogate.as_ref().expect("learned mode has surrogate");
                let delta_a = self.system.pull_ins(&x);
                let extrapolated = surrogate.extrapolates(&delta_a);
                if extrapolated {
                    log::warn!(
                        "actuation state {delta_a:?} leaves the training range; prediction extrapolates"
                    );
                }
                let (w, delta_a_free) = surrogate.predict(&delta_a)?;
                let n_e = self.set.effector_row_count();
                let n_a = self.set.actuator_row_count();
                let w_ea: DMatrix<f64> = w.view((0, n_e), (n_e, n_a)).into();
                let w_aa: DMatrix<f64> = w.view((n_e, n_e), (n_a, n_a)).into();

                // Free effector violation rebuilt from geometry: the current
                // violation minus the contribution of the applied tensions.
                let current = DVector::from_vec(self.set.effector_violations(&x, &self.model.mesh));
                let lambda_prev = DVector::from_column_slice(&self.lambda);
                let delta_e_free = &current - &w_ea * &lambda_prev;

                let eps = self.config.eps_reg.unwrap_or_else(|| default_regularization(&w_ea));
                Ok((
                    InverseProblem {
                        w_ea,
                        w_aa,
                        delta_e_free,
                        delta_a_free,
                        lambda_bounds: self.model.lambda_bounds(),
                        delta_bounds: self.model.delta_bounds(),
                        eps_reg: eps,
                    },
                    extrapolated,
                ))
            }
        }
    }

    /// Clamps the tension update so the predicted actuation displacement
    /// change stays within `step_alpha` of each cable's course.
    fn damp(&self, problem: &InverseProblem, lambda_new: &[f64], delta_a_now: &[f64]) -> Vec<f64> {
        let mut ratio: f64 = 1.0;
        let predicted = &problem.w_aa * DVector::from_column_slice(lambda_new) + &problem.delta_a_free;
        for i in 0..lambda_new.len() {
            let course = self.model.cables[i].delta_bounds[1] - self.model.cables[i].delta_bounds[0];
            if course <= 0.0 {
                continue;
            }
            let step = (predicted[i] - delta_a_now[i]).abs();
            ratio = ratio.max(step / (self.config.step_alpha * course));
        }
        if ratio <= 1.0 {
            return lambda_new.to_vec();
        }
        self.lambda
            .iter()
            .zip(lambda_new)
            .map(|(prev, new)| prev + (new - prev) / ratio)
            .collect()
    }

    /// One control step: linearize, solve the QP, apply the tensions, solve
    /// the FEM equilibrium.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (problem, extrapolated) = self.problem_blocks()?;
        let solution = solve_inverse(&problem, self.warm.as_ref())?;

        let delta_a_now = self.system.pull_ins(self.system.positions());
        let lambda_applied = self.damp(&problem, solution.x.as_slice(), &delta_a_now);

        self.system.solve_with_actuation(&lambda_applied)?;

        let change = self
            .lambda
            .iter()
            .zip(&lambda_applied)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if change <= self.config.stability_tol {
            self.stall += 1;
        } else {
            self.stall = 0;
        }

        self.lambda = lambda_applied.clone();
        self.warm = Some(solution.clone());
        self.step_counter += 1;

        let x = self.system.positions();
        let eff = self.set.effectors[0].position(x, &self.model.mesh);
        let record = StepRecord {
            step: self.step_counter,
            goal: self.set.effectors[0].goal,
            effector: [eff.x, eff.y, eff.z],
            err_norm: self.goal_error(),
            delta_a: self.system.pull_ins(x),
            lambda: lambda_applied,
            mode: self.config.mode.to_string(),
            kkt: solution.diagnostics.kkt,
            qp_iters: solution.diagnostics.iters,
            extrapolated,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Iterates until the goal tolerance, a stable tension plateau, or the
    /// step budget is hit.
    pub fn run_to_goal(&mut self, goals: &[Vector3<f64>]) -> Result<GoalSummary> {
        self.set_goals(goals)?;
        let mut converged = self.goal_error() <= self.config.tol_goal;
        let mut steps = 0;
        while !converged && steps < self.config.max_steps {
            let rec = self.step()?;
            steps += 1;
            if rec.err_norm <= self.config.tol_goal || self.stall >= 3 {
                converged = rec.err_norm <= self.config.tol_goal;
                break;
            }
        }
        Ok(GoalSummary {
            goal: [goals[0].x, goals[0].y, goals[0].z],
            converged,
            steps,
            final_err: self.goal_error(),
        })
    }
}

/// Evenly spaced goals on a horizontal circle around the effector's free
/// position. Pulling cables can only lower a cable-driven tip, so the circle
/// plane is calibrated to the height the tip reaches when a single cable
/// bends it out to the circle radius, with a small extra drop that
/// co-contraction can always supply.
pub fn circle_goals(model: &RobotModel, n: usize, radius: Option<f64>) -> Result<Vec<Vector3<f64>>> {
    let r = radius.unwrap_or(0.25 * model.height());
    let set = model.constraint_set()?;

    let mut sys = model.build_system()?;
    sys.solve_free()?;
    let tip_free = set.effectors[0].position(sys.positions(), &model.mesh);

    // Bisection on the first cable's pull-in for lateral reach = r.
    let course = model.cables[0].delta_bounds;
    let lateral_at = |s: f64, sys: &mut FemSystem| -> Result<(f64, f64)> {
        let mut targets = vec![0.0; model.cable_count()];
        targets[0] = s;
        sys.solve_with_imposed_pull_ins(&targets)?;
        let tip = set.effectors[0].position(sys.positions(), &model.mesh);
        let lateral = ((tip.x - tip_free.x).powi(2) + (tip.y - tip_free.y).powi(2)).sqrt();
        Ok((lateral, tip.z))
    };

    let (mut lo, mut hi) = (course[0].max(0.0), course[1]);
    let (reach_max, mut z_plane) = lateral_at(hi, &mut sys)?;
    if reach_max < r {
        return Err(Error::InvalidArgument(format!(
            "circle radius {r} exceeds the single-cable lateral reach {reach_max:.3}"
        )));
    }
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let (lateral, z) = lateral_at(mid, &mut sys)?;
        if lateral < r {
            lo = mid;
        } else {
            hi = mid;
            z_plane = z;
        }
    }

    // Margin the plane slightly below the pure-bend height; the controller
    // recovers it by pulling all cables a little.
    let center = Vector3::new(tip_free.x, tip_free.y, z_plane - 0.01 * model.height());
    Ok((0..n)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            center + Vector3::new(r * th.cos(), r * th.sin(), 0.0)
        })
        .collect())
}

/// Runs a goal schedule to convergence each, continuing from the previous
/// state. Per-goal failures are recorded and the run continues.
pub fn run_trajectory(
    session: &mut ControlSession,
    goals: &[Vector3<f64>],
) -> Result<Vec<GoalSummary>> {
    let mut summaries = Vec::with_capacity(goals.len());
    for goal in goals {
        match session.run_to_goal(&[*goal]) {
            Ok(s) => summaries.push(s),
            Err(e) => {
                log::warn!("goal {goal:?} failed: {e}");
                summaries.push(GoalSummary {
                    goal: [goal.x, goal.y, goal.z],
                    converged: false,
                    steps: session.config.max_steps,
                    final_err: f64::NAN,
                });
            }
        }
    }
    Ok(summaries)
}

/// Writes the trajectory log CSV:
/// `step,goal_x,goal_y,goal_z,eff_x,eff_y,eff_z,err_norm,lambda_0..k,mode`.
pub fn save_trajectory_csv(path: &Path, records: &[StepRecord], n_cables: usize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let lambda_cols: Vec<String> = (0..n_cables).map(|i| format!("lambda_{i}")).collect();
    writeln!(
        out,
        "step,goal_x,goal_y,goal_z,eff_x,eff_y,eff_z,err_norm,{},mode",
        lambda_cols.join(",")
    )?;
    for r in records {
        let lambdas: Vec<String> = r.lambda.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.goal[0],
            r.goal[1],
            r.goal[2],
            r.effector[0],
            r.effector[1],
            r.effector[2],
            r.err_norm,
            lambdas.join(","),
            r.mode
        )?;
    }
    Ok(())
}

/// Per-mode summary extracted from a trajectory CSV: rows are grouped into
/// goals by consecutive identical goal columns, and the last row of each
/// group carries the final error.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryReport {
    pub goals: usize,
    pub mean_final_error: f64,
    pub max_final_error: f64,
}

pub fn summarize_trajectory_csv(path: &Path) -> Result<TrajectoryReport> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{path:?}: empty log")))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{path:?}: missing column {name}")))
    };
    let (gx, gy, gz, err) = (idx("goal_x")?, idx("goal_y")?, idx("goal_z")?, idx("err_norm")?);

    let mut finals: Vec<f64> = Vec::new();
    let mut current_goal: Option<[String; 3]> = None;
    let mut last_err: Option<f64> = None;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(',').collect();
        let goal = [vals[gx].to_string(), vals[gy].to_string(), vals[gz].to_string()];
        let e: f64 = vals[err]
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("{path:?}: bad err_norm: {e}")))?;
        if current_goal.as_ref() != Some(&goal) {
            if let Some(prev) = last_err {
                finals.push(prev);
            }
            current_goal = Some(goal);
        }
        last_err = Some(e);
    }
    if let Some(prev) = last_err {
        finals.push(prev);
    }
    if finals.is_empty() {
        return Err(Error::InvalidArgument(format!("{path:?}: no data rows")));
    }
    Ok(TrajectoryReport {
        goals: finals.len(),
        mean_final_error: finals.iter().sum::<f64>() / finals.len() as f64,
        max_final_error: finals.iter().fold(0.0f64, |m, &v| m.max(v)),
    })
}

// --- gripper ----------------------------------------------------------------

/// Reflects a resolved robot across the plane `x = plane_x`. Tets are
/// reordered to keep volumes positive; node indices are unchanged so cables,
/// effectors, and fixed nodes carry over directly.
pub fn mirror_model(model: &RobotModel, plane_x: f64) -> Result<RobotModel> {
    let mut mesh = model.mesh.clone();
    let reflect = |p: &Point3<f64>| Point3::new(2.0 * plane_x - p.x, p.y, p.z);
    for p in mesh.nodes.iter_mut() {
        *p = reflect(p);
    }
    for p in mesh.rest_nodes.iter_mut() {
        *p = reflect(p);
    }
    for t in mesh.tets.iter_mut() {
        t.swap(1, 2);
    }
    mesh.validate()?;

    let cables = model
        .cables
        .iter()
        .map(|c| {
            let mut c = c.clone();
            if let Some(a) = &mut c.pull_anchor {
                a[0] = 2.0 * plane_x - a[0];
            }
            c
        })
        .collect();
    let effectors = model
        .effectors
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.goal[0] = 2.0 * plane_x - e.goal[0];
            e
        })
        .collect();

    Ok(RobotModel {
        mesh,
        material: model.material,
        gravity: model.gravity,
        fixed_nodes: model.fixed_nodes.clone(),
        cables,
        effectors,
    })
}

/// The reflection's linear part, for conjugating predicted compliance blocks.
pub fn mirror_matrix() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct GraspRecord {
    pub step: usize,
    pub goal: [f64; 3],
    pub effector1: [f64; 3],
    pub effector2: [f64; 3],
    pub err_norm: f64,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub coupling_force: [f64; 3],
    /// Measured `||P_e1 + beta - P_e2||` after the FEM update.
    pub equality_residual: f64,
    pub mode: String,
}

pub struct GraspOutcome {
    pub records: Vec<GraspRecord>,
    pub converged: bool,
    pub final_err: f64,
}

/// Two-finger grasp: finger 2 is the mirror of finger 1 and shares its
/// surrogate (blocks conjugated by the reflection). Per step both condensed
/// representations are built, the coupled QP is solved, and each finger gets
/// its tensions plus the equal/opposite coupling force on the effector.
pub struct GraspSession {
    pub finger1: RobotModel,
    pub finger2: RobotModel,
    sys1: FemSystem,
    sys2: FemSystem,
    set1: ConstraintSet,
    set2: ConstraintSet,
    surrogate: Option<SurrogateModel>,
    pub config: ControlConfig,
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
    lambda_e: Vector3<f64>,
    warm: Option<QpSolution>,
    stall: usize,
    pub records: Vec<GraspRecord>,
}

impl GraspSession {
    pub fn new(
        finger: RobotModel,
        plane_x: f64,
        config: ControlConfig,
        surrogate: Option<SurrogateModel>,
    ) -> Result<Self> {
        if config.mode == ControlMode::Learned && surrogate.is_none() {
            return Err(Error::InvalidArgument(
                "learned mode needs a trained surrogate model".into(),
            ));
        }
        if finger.effectors.len() != 1 {
            return Err(Error::InvalidArgument(
                "grasp fingers need exactly one effector".into(),
            ));
        }
        let finger2 = mirror_model(&finger, plane_x)?;
        let mut sys1 = finger.build_system()?;
        let mut sys2 = finger2.build_system()?;
        // The coupled loop certifies stationarity at 1e-9 tension changes;
        // the equilibria must be solved below that noise floor.
        sys1.newton.tol = 1e-11;
        sys2.newton.tol = 1e-11;
        sys1.solve_free()?;
        sys2.solve_free()?;
        let set1 = finger.constraint_set()?;
        let set2 = finger2.constraint_set()?;
        let n = finger.cable_count();
        Ok(GraspSession {
            finger1: finger,
            finger2,
            sys1,
            sys2,
            set1,
            set2,
            surrogate,
            config,
            lambda1: vec![0.0; n],
            lambda2: vec![0.0; n],
            lambda_e: Vector3::zeros(),
            warm: None,
            stall: 0,
            records: Vec::new(),
        })
    }

    pub fn effector_positions(&self) -> (Vector3<f64>, Vector3<f64>) {
        (
            self.set1.effectors[0].position(self.sys1.positions(), &self.finger1.mesh),
            self.set2.effectors[0].position(self.sys2.positions(), &self.finger2.mesh),
        )
    }

    /// Effector-space blocks for one finger, in world frame.
    fn finger_blocks(
        sys: &mut FemSystem,
        set: &ConstraintSet,
        surrogate: Option<&SurrogateModel>,
        mirrored: bool,
        lambda_prev: &[f64],
        bounds: Vec<[f64; 2]>,
    ) -> Result<FingerBlocks> {
        let x = sys.positions().to_vec();
        let effector_prev = set.effectors[0].position(&x, &sys.mesh);
        let (w_ee, w_ea) = match surrogate {
            None => {
                let state = condense_with(sys, set, lambda_prev, Parallelism::Auto)?;
                let w_ee3 = state.w_ee();
                let w_ee = Matrix3::from_fn(|i, j| w_ee3[(i, j)]);
                (w_ee, state.w_ea())
            }
            Some(model) => {
                let delta_a = sys.pull_ins(&x);
                if model.extrapolates(&delta_a) {
                    log::warn!("grasp finger actuation {delta_a:?} extrapolates beyond training range");
                }
                let (w, _dfree) = model.predict(&delta_a)?;
                let n_e = 3;
                let n_a = delta_a.len();
                let mut w_ee = Matrix3::from_fn(|i, j| w[(i, j)]);
                let mut w_ea: DMatrix<f64> = w.view((0, n_e), (n_e, n_a)).into();
                if mirrored {
                    let r = mirror_matrix();
                    w_ee = r * w_ee * r.transpose();
                    let mut reflected = w_ea.clone();
                    for col in 0..reflected.ncols() {
                        let v = Vector3::new(w_ea[(0, col)], w_ea[(1, col)], w_ea[(2, col)]);
                        let rv = r * v;
                        for row in 0..3 {
                            reflected[(row, col)] = rv[row];
                        }
                    }
                    w_ea = reflected;
                }
                (w_ee, w_ea)
            }
        };
        Ok(FingerBlocks {
            w_ea,
            w_ee,
            lambda_prev: DVector::from_column_slice(lambda_prev),
            lambda_bounds: bounds,
            effector_prev,
        })
    }

    /// One coupled step toward `p_goal` with object offset `beta`.
    pub fn step(&mut self, p_goal: Vector3<f64>, beta: Vector3<f64>) -> Result<GraspRecord> {
        let f1 = Self::finger_blocks(
            &mut self.sys1,
            &self.set1,
            self.surrogate.as_ref(),
            false,
            &self.lambda1,
            self.finger1.lambda_bounds(),
        )?;
        let f2 = Self::finger_blocks(
            &mut self.sys2,
            &self.set2,
            self.surrogate.as_ref(),
            true,
            &self.lambda2,
            self.finger2.lambda_bounds(),
        )?;

        let eps = self.config.eps_reg.unwrap_or_else(|| {
            (default_regularization(&f1.w_ea) + default_regularization(&f2.w_ea)).max(1e-14)
        });
        let problem = CoupledProblem {
            finger1: f1,
            finger2: f2,
            p_goal,
            beta,
            lambda_e_prev: self.lambda_e,
            lambda_e_bounds: None,
            eps_reg: eps,
        };
        let sol = solve_coupled(&problem, self.warm.as_ref())?;

        // Step damping on the joint tension update.
        let mut ratio: f64 = 1.0;
        for (i, c) in self.finger1.cables.iter().enumerate() {
            let course = c.delta_bounds[1] - c.delta_bounds[0];
            if course > 0.0 {
                ratio = ratio.max((sol.lambda_1[i] - self.lambda1[i]).abs() / (self.config.step_alpha * course));
            }
        }
        for (i, c) in self.finger2.cables.iter().enumerate() {
            let course = c.delta_bounds[1] - c.delta_bounds[0];
            if course > 0.0 {
                ratio = ratio.max((sol.lambda_2[i] - self.lambda2[i]).abs() / (self.config.step_alpha * course));
            }
        }
        let blend = if ratio > 1.0 { 1.0 / ratio } else { 1.0 };
        let l1: Vec<f64> = self
            .lambda1
            .iter()
            .enumerate()
            .map(|(i, &p)| p + (sol.lambda_1[i] - p) * blend)
            .collect();
        let l2: Vec<f64> = self
            .lambda2
            .iter()
            .enumerate()
            .map(|(i, &p)| p + (sol.lambda_2[i] - p) * blend)
            .collect();
        let le = self.lambda_e + (sol.lambda_e - self.lambda_e) * blend;

        // Apply: tensions plus the equal/opposite coupling force.
        apply_effector_force(&mut self.sys1, &self.set1, le)?;
        self.sys1.solve_with_actuation(&l1)?;
        apply_effector_force(&mut self.sys2, &self.set2, -le)?;
        self.sys2.solve_with_actuation(&l2)?;

        let change = l1
            .iter()
            .zip(&self.lambda1)
            .chain(l2.iter().zip(&self.lambda2))
            .map(|(a, b)| (a - b).abs())
            .fold((le - self.lambda_e).amax(), f64::max);
        if change <= self.config.stability_tol {
            self.stall += 1;
        } else {
            self.stall = 0;
        }

        self.lambda1 = l1;
        self.lambda2 = l2;
        self.lambda_e = le;
        self.warm = Some(QpSolution {
            x: sol.lambda_1.clone(),
            multipliers: vec![],
            active_rows: vec![],
            diagnostics: sol.diagnostics.clone(),
        });

        let (p1, p2) = self.effector_positions();
        let record = GraspRecord {
            step: self.records.len() + 1,
            goal: [p_goal.x, p_goal.y, p_goal.z],
            effector1: [p1.x, p1.y, p1.z],
            effector2: [p2.x, p2.y, p2.z],
            err_norm: (p1 - p_goal).norm(),
            lambda1: self.lambda1.clone(),
            lambda2: self.lambda2.clone(),
            coupling_force: [le.x, le.y, le.z],
            equality_residual: (p1 + beta - p2).norm(),
            mode: self.config.mode.to_string(),
        };
        self.records.push(record.clone());
        Ok(record)
    }

    /// Runs the coupled loop until the goal tolerance is met at a stationary
    /// tension state (the measured equality residual tightens only once the
    /// tensions stop moving), or the stability/step budget is exhausted.
    pub fn run(&mut self, p_goal: Vector3<f64>, beta: Vector3<f64>) -> Result<GraspOutcome> {
        let mut converged = false;
        for _ in 0..self.config.max_steps {
            let rec = self.step(p_goal, beta)?;
            if self.stall >= 3 {
                converged = rec.err_norm <= self.config.tol_goal;
                break;
            }
        }
        let (p1, _) = self.effector_positions();
        Ok(GraspOutcome {
            records: self.records.clone(),
            converged,
            final_err: (p1 - p_goal).norm(),
        })
    }
}

/// Distributes a force over the effector's support nodes by their weights.
fn apply_effector_force(sys: &mut FemSystem, set: &ConstraintSet, force: Vector3<f64>) -> Result<()> {
    sys.clear_point_loads();
    for (node, w) in set.effectors[0].support(&sys.mesh) {
        sys.set_point_load(node, force * w);
    }
    Ok(())
}

/// Grasp log CSV: the trajectory columns plus the coupling force and the
/// measured equality residual.
pub fn save_grasp_csv(path: &Path, records: &[GraspRecord], n_cables: usize) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let l1: Vec<String> = (0..n_cables).map(|i| format!("lambda1_{i}")).collect();
    let l2: Vec<String> = (0..n_cables).map(|i| format!("lambda2_{i}")).collect();
    writeln!(
        out,
        "step,goal_x,goal_y,goal_z,eff_x,eff_y,eff_z,err_norm,{},{},mode,coupling_fx,coupling_fy,coupling_fz,equality_residual",
        l1.join(","),
        l2.join(",")
    )?;
    for r in records {
        let v1: Vec<String> = r.lambda1.iter().map(|v| format!("{v}")).collect();
        let v2: Vec<String> = r.lambda2.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.goal[0],
            r.goal[1],
            r.goal[2],
            r.effector1[0],
            r.effector1[1],
            r.effector1[2],
            r.err_norm,
            v1.join(","),
            v2.join(","),
            r.mode,
            r.coupling_force[0],
            r.coupling_force[1],
            r.coupling_force[2],
            r.equality_residual
        )?;
    }
    Ok(())
}

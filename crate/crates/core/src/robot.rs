//! Robot descriptions: mesh + material + anchoring + cables + effectors.
//!
//! A [`RobotConfig`] is the JSON-facing schema; [`RobotModel`] is the resolved
//! form with the mesh loaded and all indices validated. The two reference
//! robots used throughout the tests and the CLI are built here as ordinary
//! configs, not hard-coded geometry.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::constraints::{CableActuator, ConstraintSet, Effector, EffectorPoint};
use crate::error::{Error, Result};
use crate::fem::{FemSystem, Material};
use crate::mesh::{build_box_mesh, load_mesh, TetMesh};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshSource {
    Box { dims: [f64; 3], res: [usize; 3] },
    File { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialConfig {
    pub young_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    #[serde(default)]
    pub gravity: [f64; 3],
}

/// Axis-aligned box predicate selecting the Dirichlet-fixed nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl FixedRegion {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - 1e-9 && p[k] <= self.max[k] + 1e-9)
    }
}

/// On-disk robot description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotConfig {
    pub mesh: MeshSource,
    pub material: MaterialConfig,
    pub fixed_region: FixedRegion,
    pub cables: Vec<CableActuator>,
    pub effectors: Vec<Effector>,
}

/// Resolved robot, ready to instantiate FEM systems and constraint sets.
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub mesh: TetMesh,
    pub material: Material,
    pub gravity: Vector3<f64>,
    pub fixed_nodes: Vec<usize>,
    pub cables: Vec<CableActuator>,
    pub effectors: Vec<Effector>,
}

impl RobotConfig {
    pub fn load(path: &Path) -> Result<RobotConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RobotConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Resolves the mesh (relative paths against `base_dir`) and validates
    /// every index and bound.
    pub fn resolve(&self, base_dir: &Path) -> Result<RobotModel> {
        let mesh = match &self.mesh {
            MeshSource::Box { dims, res } => build_box_mesh(*dims, *res)?,
            MeshSource::File { path } => {
                let p = Path::new(path);
                let full = if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
                load_mesh(&full)?
            }
        };
        let material = Material::new(
            self.material.young_modulus,
            self.material.poisson_ratio,
            self.material.density,
        )?;
        let gravity = Vector3::from(self.material.gravity);

        let fixed_nodes: Vec<usize> = (0..mesh.node_count())
            .filter(|&i| self.fixed_region.contains(&mesh.rest_nodes[i]))
            .collect();
        if fixed_nodes.is_empty() {
            return Err(Error::InvalidArgument(
                "fixed_region selects no nodes; the robot would float".into(),
            ));
        }

        for (i, c) in self.cables.iter().enumerate() {
            c.validate(&mesh)
                .map_err(|e| Error::InvalidArgument(format!("cable {i}: {e}")))?;
        }
        for (i, e) in self.effectors.iter().enumerate() {
            e.validate(&mesh)
                .map_err(|err| Error::InvalidArgument(format!("effector {i}: {err}")))?;
        }

        Ok(RobotModel {
            mesh,
            material,
            gravity,
            fixed_nodes,
            cables: self.cables.clone(),
            effectors: self.effectors.clone(),
        })
    }
}

impl RobotModel {
    pub fn build_system(&self) -> Result<FemSystem> {
        FemSystem::new(
            self.mesh.clone(),
            self.material,
            &self.fixed_nodes,
            self.gravity,
            self.cables.clone(),
        )
    }

    pub fn constraint_set(&self) -> Result<ConstraintSet> {
        ConstraintSet::new(self.cables.clone(), self.effectors.clone(), &self.mesh)
    }

    pub fn cable_count(&self) -> usize {
        self.cables.len()
    }

    /// Robot height (z extent), the length scale of the control criteria.
    pub fn height(&self) -> f64 {
        let (lo, hi) = self.mesh.bounding_box();
        hi.z - lo.z
    }

    pub fn lambda_bounds(&self) -> Vec<[f64; 2]> {
        self.cables.iter().map(|c| c.lambda_bounds).collect()
    }

    pub fn delta_bounds(&self) -> Vec<[f64; 2]> {
        self.cables.iter().map(|c| c.delta_bounds).collect()
    }
}

/// Diamond-like reference robot: a square column with four cables routed
/// along the face midlines, bending the tip in any lateral direction while
/// co-contraction shortens it axially. The effector is the tip center.
/// Stand-in for a cable-driven parallel soft robot.
pub fn diamond_like() -> RobotConfig {
    let dims = [10.0, 10.0, 40.0];
    let res = [4, 4, 8];
    let mesh = build_box_mesh(dims, res).expect("reference mesh");

    // One cable per face midline, threaded through the layers above the base
    // and anchored straight below the first via node. The last layer stays
    // cable-free so the tip section cannot crumple under the cable.
    let faces = [(5.0, 0.0), (10.0, 5.0), (5.0, 10.0), (0.0, 5.0)];
    let cables = faces
        .iter()
        .map(|&(cx, cy)| {
            let via_nodes: Vec<usize> = (1..=7)
                .map(|k| mesh.nearest_node(&Point3::new(cx, cy, 5.0 * k as f64)))
                .collect();
            CableActuator {
                via_nodes,
                pull_anchor: Some([cx, cy, -3.0]),
                lambda_bounds: [0.0, 6.0],
                delta_bounds: [-15.0, 9.0],
            }
        })
        .collect();

    let tip = mesh.nearest_node(&Point3::new(5.0, 5.0, 40.0));
    RobotConfig {
        mesh: MeshSource::Box { dims, res },
        material: MaterialConfig {
            young_modulus: 0.12,
            poisson_ratio: 0.3,
            density: 1.1e-9,
            gravity: [0.0, 0.0, -9810.0],
        },
        fixed_region: FixedRegion { min: [0.0, 0.0, 0.0], max: [10.0, 10.0, 0.0] },
        cables,
        effectors: vec![Effector { point: EffectorPoint::Node { node: tip }, goal: [5.0, 5.0, 40.0] }],
    }
}

/// Finger-like reference robot: a slender block with two antagonist cables
/// routed along opposite faces, bending the tip in the +-x direction.
/// Stand-in for a tendon-driven soft finger.
pub fn finger_like() -> RobotConfig {
    let dims = [10.0, 10.0, 40.0];
    let res = [2, 2, 8];
    let mesh = build_box_mesh(dims, res).expect("reference mesh");

    let face_cable = |x: f64, anchor_x: f64| -> CableActuator {
        // Thread every face node at mid-width from the first free layer to
        // the tip.
        let via_nodes: Vec<usize> = (1..=8)
            .map(|k| mesh.nearest_node(&Point3::new(x, 5.0, 5.0 * k as f64)))
            .collect();
        CableActuator {
            via_nodes,
            pull_anchor: Some([anchor_x, 5.0, 0.0]),
            lambda_bounds: [0.0, 2.0],
            delta_bounds: [-18.0, 12.0],
        }
    };

    let tip = mesh.nearest_node(&Point3::new(5.0, 5.0, 40.0));
    RobotConfig {
        mesh: MeshSource::Box { dims, res },
        material: MaterialConfig {
            young_modulus: 0.25,
            poisson_ratio: 0.3,
            density: 1.1e-9,
            gravity: [0.0, 0.0, 0.0],
        },
        fixed_region: FixedRegion { min: [0.0, 0.0, 0.0], max: [10.0, 10.0, 0.0] },
        cables: vec![face_cable(0.0, -2.0), face_cable(10.0, 12.0)],
        effectors: vec![Effector { point: EffectorPoint::Node { node: tip }, goal: [5.0, 5.0, 40.0] }],
    }
}

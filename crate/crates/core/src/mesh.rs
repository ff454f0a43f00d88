//! Tetrahedral meshes for the desk-scale reference robots.
//!
//! Lengths are abstract millimeters throughout the crate. A mesh is immutable
//! after construction and safe to share across threads.

use std::fs;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volume below which a tetrahedron counts as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Node positions plus tetrahedral connectivity.
///
/// `rest_nodes` keeps the construction-time positions so deformed copies of
/// the node array can always be compared against the undeformed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub nodes: Vec<Point3<f64>>,
    pub tets: Vec<[usize; 4]>,
    pub rest_nodes: Vec<Point3<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    nodes: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
}

/// Signed volume of the tet (p0, p1, p2, p3); positive for the canonical
/// right-handed ordering.
pub fn signed_volume(p0: &Point3<f64>, p1: &Point3<f64>, p2: &Point3<f64>, p3: &Point3<f64>) -> f64 {
    let a = p1 - p0;
    let b = p2 - p0;
    let c = p3 - p0;
    a.dot(&b.cross(&c)) / 6.0
}

impl TetMesh {
    /// Builds a mesh from raw arrays, validating connectivity and volumes.
    pub fn new(nodes: Vec<Point3<f64>>, tets: Vec<[usize; 4]>) -> Result<Self> {
        let mesh = TetMesh {
            rest_nodes: nodes.clone(),
            nodes,
            tets,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Checks index ranges and rest-configuration volumes.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (t, tet) in self.tets.iter().enumerate() {
            for &i in tet {
                if i >= n {
                    return Err(Error::Mesh(format!(
                        "tet {t}: index out of range ({i} >= {n} nodes)"
                    )));
                }
            }
            let v = signed_volume(
                &self.rest_nodes[tet[0]],
                &self.rest_nodes[tet[1]],
                &self.rest_nodes[tet[2]],
                &self.rest_nodes[tet[3]],
            );
            if v.abs() <= DEGENERACY_TOL {
                return Err(Error::Mesh(format!(
                    "tet {t}: degenerate (signed volume {v:.3e})"
                )));
            }
            if v < 0.0 {
                return Err(Error::Mesh(format!(
                    "tet {t}: negative signed volume {v:.3e}; vertex ordering must be right-handed"
                )));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dof_count(&self) -> usize {
        3 * self.nodes.len()
    }

    /// Total rest volume.
    pub fn volume(&self) -> f64 {
        self.tets
            .iter()
            .map(|t| {
                signed_volume(
                    &self.rest_nodes[t[0]],
                    &self.rest_nodes[t[1]],
                    &self.rest_nodes[t[2]],
                    &self.rest_nodes[t[3]],
                )
            })
            .sum()
    }

    /// Axis-aligned bounding box of the rest configuration.
    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.rest_nodes {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Index of the rest node closest to `p`.
    pub fn nearest_node(&self, p: &Point3<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, q) in self.rest_nodes.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Regular box mesh: `res` cells per axis, each cell split into 6 tetrahedra
/// (Kuhn split). All tets come out positively oriented.
pub fn build_box_mesh(dims: [f64; 3], res: [usize; 3]) -> Result<TetMesh> {
    for (k, &d) in dims.iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "box extent {k} must be > 0, got {d}"
            )));
        }
    }
    for (k, &r) in res.iter().enumerate() {
        if r < 1 {
            return Err(Error::InvalidArgument(format!(
                "box resolution {k} must be >= 1, got {r}"
            )));
        }
    }

    let [nx, ny, nz] = res;
    let step = [dims[0] / nx as f64, dims[1] / ny as f64, dims[2] / nz as f64];

    let node_id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push(Point3::new(
                    i as f64 * step[0],
                    j as f64 * step[1],
                    k as f64 * step[2],
                ));
            }
        }
    }

    // Kuhn split: one tet per permutation of the axis steps from the low
    // corner to the high corner. Odd permutations get two vertices swapped so
    // every signed volume is positive.
    const PERMS: [([usize; 3], bool); 6] = [
        ([0, 1, 2], true),
        ([1, 2, 0], true),
        ([2, 0, 1], true),
        ([0, 2, 1], false),
        ([2, 1, 0], false),
        ([1, 0, 2], false),
    ];

    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let base = [i, j, k];
                for (perm, even) in PERMS {
                    let mut corner = base;
                    let mut path = [node_id(i, j, k); 4];
                    for (s, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        path[s + 1] = node_id(corner[0], corner[1], corner[2]);
                    }
                    if even {
                        tets.push(path);
                    } else {
                        tets.push([path[0], path[2], path[1], path[3]]);
                    }
                }
            }
        }
    }

    TetMesh::new(nodes, tets)
}

/// Writes a mesh as `{"nodes": [[x,y,z],...], "tets": [[i,j,k,l],...]}`.
pub fn save_mesh(mesh: &TetMesh, path: &Path) -> Result<()> {
    let file = MeshFile {
        nodes: mesh.nodes.iter().map(|p| [p.x, p.y, p.z]).collect(),
        tets: mesh.tets.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Loads and validates a mesh file written by [`save_mesh`].
pub fn load_mesh(path: &Path) -> Result<TetMesh> {
    let text = fs::read_to_string(path)?;
    let file: MeshFile = serde_json::from_str(&text)?;
    TetMesh::new(
        file.nodes
            .into_iter()
            .map(|[x, y, z]| Point3::new(x, y, z))
            .collect(),
        file.tets,
    )
}

//! Symmetric skyline (profile) matrix with an LDL^T factorization.
//!
//! The stiffness matrix of a tetrahedral mesh is assembled once per Newton
//! iteration and factored in place; the factor is then reused for every
//! right-hand side of the same step (Newton direction, free-motion solve,
//! and all condensation columns). Reverse Cuthill-McKee ordering on the node
//! graph keeps the profile narrow for box meshes.

use crate::error::{Error, Result};

/// Reverse Cuthill-McKee ordering of an undirected node graph.
///
/// Returns `perm` with `perm[old] = new`. Deterministic: ties are broken by
/// node index everywhere.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    if n == 0 {
        return Vec::new();
    }

    let degree: Vec<usize> = adjacency.iter().map(|a| a.len()).collect();

    // Pseudo-peripheral start: min-degree node, then two BFS sweeps.
    let bfs_far = |start: usize| -> usize {
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        dist[start] = 0;
        queue.push_back(start);
        let mut far = start;
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if (dist[v], degree[v], v) > (dist[far], degree[far], far) {
                        far = v;
                    }
                    queue.push_back(v);
                }
            }
        }
        far
    };

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];

    // The graph may be disconnected; seed each component separately.
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        let start = bfs_far(bfs_far(seed));
        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adjacency[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| (degree[v], v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }

    order.reverse();
    let mut perm = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        perm[old] = new;
    }
    perm
}

/// Symmetric matrix stored as a column-wise upper-triangle profile, with a
/// DOF permutation applied at the API boundary so callers work in original
/// indices.
#[derive(Clone)]
pub struct SkylineMatrix {
    n: usize,
    /// perm[original_dof] = packed_dof
    perm: Vec<usize>,
    /// First stored row of each packed column (envelope).
    env: Vec<usize>,
    /// col_ptr[j]..col_ptr[j+1] indexes the strict-upper rows env[j]..j of column j.
    col_ptr: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
    factored: bool,
}

impl SkylineMatrix {
    /// Builds the profile for a mesh whose node graph is `adjacency`
    /// (self-loops not required), with three DOFs per node and `node_perm`
    /// from [`reverse_cuthill_mckee`].
    pub fn for_node_graph(adjacency: &[Vec<usize>], node_perm: &[usize]) -> Self {
        let n_nodes = adjacency.len();
        let n = 3 * n_nodes;

        let mut perm = vec![0usize; n];
        for old in 0..n_nodes {
            for c in 0..3 {
                perm[3 * old + c] = 3 * node_perm[old] + c;
            }
        }

        // Envelope per packed node: lowest packed neighbor (including itself).
        let mut min_adj = vec![usize::MAX; n_nodes];
        for old in 0..n_nodes {
            let p = node_perm[old];
            min_adj[p] = min_adj[p].min(p);
            for &nbr in &adjacency[old] {
                let q = node_perm[nbr];
                min_adj[p] = min_adj[p].min(q);
            }
        }

        let mut env = vec![0usize; n];
        for pn in 0..n_nodes {
            for c in 0..3 {
                env[3 * pn + c] = 3 * min_adj[pn];
            }
        }

        let mut col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            col_ptr[j + 1] = col_ptr[j] + (j - env[j]);
        }
        let vals = vec![0.0; col_ptr[n]];

        SkylineMatrix {
            n,
            perm,
            env,
            col_ptr,
            vals,
            diag: vec![0.0; n],
            factored: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored profile entries (strict upper triangle), a proxy for memory and
    /// factorization cost.
    pub fn profile_len(&self) -> usize {
        self.vals.len()
    }

    /// Zeroes all values for re-assembly.
    pub fn reset(&mut self) {
        self.vals.fill(0.0);
        self.diag.fill(0.0);
        self.factored = false;
    }

    /// Largest absolute diagonal entry (before factorization).
    pub fn max_diag(&self) -> f64 {
        self.diag.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Adds `tau` to every diagonal entry. Used to damp an indefinite tangent
    /// until it factors.
    pub fn shift_diagonal(&mut self, tau: f64) {
        debug_assert!(!self.factored);
        for d in self.diag.iter_mut() {
            *d += tau;
        }
    }

    /// Accumulates `v` at (i, j) in original DOF indices. Only one triangle
    /// needs to be supplied; entries with i > j are mirrored.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(!self.factored, "assembling into a factored matrix");
        let (pi, pj) = (self.perm[i], self.perm[j]);
        let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
        if r == c {
            self.diag[r] += v;
        } else {
            debug_assert!(r >= self.env[c], "entry outside profile");
            let idx = self.col_ptr[c] + (r - self.env[c]);
            self.vals[idx] += v;
        }
    }

    #[inline]
    pub fn set_diag(&mut self, i: usize, v: f64) {
        let p = self.perm[i];
        self.diag[p] = v;
        self.factored = false;
    }

    /// In-place LDL^T factorization. Fails on a non-positive pivot, which for
    /// an elastic tangent means insufficient Dirichlet anchoring or an
    /// unstable state.
    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let mut w = vec![0.0f64; n];

        for j in 0..n {
            let mj = self.env[j];

            // w[i] = A[i][j] - sum_{r} U[r][i] * w[r], then U[i][j] = w[i]/D[i].
            for i in mj..j {
                w[i] = self.vals[self.col_ptr[j] + (i - mj)];
            }
            for i in mj..j {
                let mi = self.env[i];
                let lo = mi.max(mj);
                let mut s = w[i];
                let ci = self.col_ptr[i];
                for r in lo..i {
                    s -= self.vals[ci + (r - mi)] * w[r];
                }
                w[i] = s;
            }

            let mut d = self.diag[j];
            for i in mj..j {
                let u = w[i] / self.diag[i];
                d -= u * w[i];
                self.vals[self.col_ptr[j] + (i - mj)] = u;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization { dof: j, pivot: d });
            }
            self.diag[j] = d;
        }

        self.factored = true;
        Ok(())
    }

    pub fn is_factored(&self) -> bool {
        self.factored
    }

    /// Solves `A x = b` using the factorization; `b` is in original DOF order.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert!(self.factored, "solve before factor");
        assert_eq!(b.len(), self.n);

        // Permute in.
        let mut z = vec![0.0f64; self.n];
        for (old, &p) in self.perm.iter().enumerate() {
            z[p] = b[old];
        }

        // Forward: U^T z' = z (column-oriented).
        for i in 0..self.n {
            let mi = self.env[i];
            let ci = self.col_ptr[i];
            let mut s = z[i];
            for r in mi..i {
                s -= self.vals[ci + (r - mi)] * z[r];
            }
            z[i] = s;
        }
        // Diagonal.
        for i in 0..self.n {
            z[i] /= self.diag[i];
        }
        // Backward: U x = z'.
        for j in (0..self.n).rev() {
            let mj = self.env[j];
            let cj = self.col_ptr[j];
            let xj = z[j];
            for r in mj..j {
                z[r] -= self.vals[cj + (r - mj)] * xj;
            }
        }

        // Permute out.
        let mut x = vec![0.0f64; self.n];
        for (old, &p) in self.perm.iter().enumerate() {
            x[old] = z[p];
        }
        x
    }
}

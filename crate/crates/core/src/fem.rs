//! P1 assembly on the refined mesh, grouped by coarse parent cell.

use std::sync::Arc;

use crate::energy::DensityField;
use crate::error::{Error, Result};
use crate::linsolve::{
    weighted_mean, NeumannOperator, SolverConfig, SparsityPattern, SpsdSolver, SymmetricMatrix,
};
use crate::mesh::{RefinementMap, TriMesh};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) || ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]"
            )));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            x1: self.x1 + dx,
            y0: self.y0 + dy,
            y1: self.y1 + dy,
        }
    }

    fn check_aligned(&self, mesh: &TriMesh) -> Result<()> {
        for v in [self.x0, self.x1, self.y0, self.y1] {
            if !mesh.is_lattice_coordinate(v) {
                return Err(Error::Alignment(format!(
                    "coordinate {v} is not on the {}-division lattice",
                    mesh.divisions()
                )));
            }
        }
        Ok(())
    }
}

/// The local stiffness of one coarse cell, restricted to its 6 fine vertices.
#[derive(Debug, Clone)]
pub struct CellBlock {
    /// Fine vertex indices, sorted.
    pub dofs: [usize; 6],
    /// Dense local matrix in `dofs` order.
    pub local: [[f64; 6]; 6],
    slots: [[usize; 6]; 6],
}

impl CellBlock {
    /// `(A^(i) u)` restricted to the block's dofs.
    pub fn apply_local(&self, u: &[f64]) -> [f64; 6] {
        let ul: [f64; 6] = std::array::from_fn(|a| u[self.dofs[a]]);
        std::array::from_fn(|a| (0..6).map(|b| self.local[a][b] * ul[b]).sum())
    }

    /// `vᵀ A^(i) w`.
    pub fn bilinear(&self, v: &[f64], w: &[f64]) -> f64 {
        let aw = self.apply_local(w);
        (0..6).map(|a| v[self.dofs[a]] * aw[a]).sum()
    }

    /// Scatters `A^(i)` into a full `M × M` dense matrix.
    pub fn to_dense(&self, m: usize) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; m]; m];
        for a in 0..6 {
            for b in 0..6 {
                d[self.dofs[a]][self.dofs[b]] = self.local[a][b];
            }
        }
        d
    }
}

/// The cell stiffness matrices `A^(i)` of every coarse cell.
#[derive(Debug, Clone)]
pub struct CellStiffnessSet {
    blocks: Vec<CellBlock>,
    pattern: Arc<SparsityPattern>,
    weights: Arc<Vec<f64>>,
}

impl CellStiffnessSet {
    pub fn blocks(&self) -> &[CellBlock] {
        &self.blocks
    }

    pub fn n_cells(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.pattern.dim()
    }

    /// Fine vertex masses, used as mean weights.
    pub fn vertex_masses(&self) -> &Arc<Vec<f64>> {
        &self.weights
    }

    /// `Σ_i c_i A^(i)` as a sparse matrix.
    pub fn combine(&self, coeffs: &[f64]) -> SymmetricMatrix {
        let mut m = SymmetricMatrix::zeros(self.pattern.clone());
        let values = m.values_mut();
        for (blk, &c) in self.blocks.iter().zip(coeffs) {
            for a in 0..6 {
                for b in 0..6 {
                    values[blk.slots[a][b]] += c * blk.local[a][b];
                }
            }
        }
        m
    }

    /// The state operator `A(μ) = Σ_i (μ_i + δ) A^(i)`.
    pub fn operator(&self, mu: &[f64], delta: f64) -> NeumannOperator {
        let coeffs: Vec<f64> = mu.iter().map(|m| m + delta).collect();
        NeumannOperator {
            matrix: self.combine(&coeffs),
            weights: self.weights.clone(),
        }
    }

    /// The full fine-mesh stiffness matrix `Σ_i A^(i)`.
    pub fn full_stiffness(&self) -> SymmetricMatrix {
        self.combine(&vec![1.0; self.n_cells()])
    }
}

/// P1 element matrix `|T| ∇λ_a · ∇λ_b`.
pub fn element_stiffness(p: [[f64; 2]; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = p;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let area = 0.5 * det.abs();
    // ∇λ_k = rot90(opposite edge) / det
    let grads: [[f64; 2]; 3] = [
        [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
        [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
        [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
    ];
    std::array::from_fn(|i| {
        std::array::from_fn(|j| area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]))
    })
}

/// Assembles `A^(i)` for every coarse cell from its 4 fine children.
pub fn assemble_cell_stiffness(
    coarse: &TriMesh,
    fine: &TriMesh,
    rmap: &RefinementMap,
) -> Result<CellStiffnessSet> {
    rmap.check(coarse, fine)?;
    let verts = fine.vertices();
    let tris = fine.triangles();
    let mut raw = Vec::with_capacity(rmap.n_coarse());
    for c in 0..rmap.n_coarse() {
        let kids = rmap.children_of(c);
        let mut dofs: Vec<usize> = kids.iter().flat_map(|&t| tris[t]).collect();
        dofs.sort_unstable();
        dofs.dedup();
        let dofs: [usize; 6] = dofs.try_into().map_err(|d: Vec<usize>| {
            Error::InvalidArgument(format!(
                "coarse cell {c} touches {} fine vertices, expected 6",
                d.len()
            ))
        })?;
        let mut local = [[0.0; 6]; 6];
        for &t in &kids {
            let tri = tris[t];
            let ke = element_stiffness([verts[tri[0]], verts[tri[1]], verts[tri[2]]]);
            let loc: [usize; 3] =
                std::array::from_fn(|a| dofs.iter().position(|&d| d == tri[a]).expect("dof"));
            for a in 0..3 {
                for b in 0..3 {
                    local[loc[a]][loc[b]] += ke[a][b];
                }
            }
        }
        raw.push((dofs, local));
    }
    let entries = raw.iter().flat_map(|(dofs, _)| {
        dofs.iter()
            .flat_map(move |&r| dofs.iter().map(move |&c| (r, c)))
    });
    let pattern = Arc::new(SparsityPattern::from_entries(fine.n_vertices(), entries));
    let blocks = raw
        .into_iter()
        .map(|(dofs, local)| {
            let slots = std::array::from_fn(|a| {
                std::array::from_fn(|b| pattern.slot(dofs[a], dofs[b]).expect("slot"))
            });
            CellBlock { dofs, local, slots }
        })
        .collect();
    Ok(CellStiffnessSet {
        blocks,
        pattern,
        weights: Arc::new(fine.vertex_masses()),
    })
}

/// Load vector `f_p = ∫ f φ_p dx` on the fine mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadVector {
    pub values: Vec<f64>,
}

impl LoadVector {
    /// Exact load of a forcing that is constant on each fine triangle.
    pub fn from_cell_values(fine: &TriMesh, cell_values: &[f64]) -> Result<Self> {
        if cell_values.len() != fine.n_triangles() {
            return Err(Error::InvalidArgument(format!(
                "expected {} cell values, got {}",
                fine.n_triangles(),
                cell_values.len()
            )));
        }
        let mut values = vec![0.0; fine.n_vertices()];
        for (t, tri) in fine.triangles().iter().enumerate() {
            let share = cell_values[t] * fine.areas()[t] / 3.0;
            for &v in tri {
                values[v] += share;
            }
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Load vector of `f = χ(R⁺) − χ(R⁻)`.
pub fn assemble_load(f_plus: &Rect, f_minus: &Rect, fine: &TriMesh) -> Result<LoadVector> {
    f_plus.check_aligned(fine)?;
    f_minus.check_aligned(fine)?;
    if (f_plus.area() - f_minus.area()).abs() > 1e-14 {
        return Err(Error::InvalidArgument(format!(
            "source and sink areas differ ({} vs {})",
            f_plus.area(),
            f_minus.area()
        )));
    }
    let cells: Vec<f64> = (0..fine.n_triangles())
        .map(|t| {
            // aligned rectangles contain whole triangles, so the centroid decides
            let c = fine.centroid(t);
            f64::from(u8::from(f_plus.contains(c))) - f64::from(u8::from(f_minus.contains(c)))
        })
        .collect();
    LoadVector::from_cell_values(fine, &cells)
}

/// Zero-mean potential `u(μ)`.
#[derive(Debug, Clone)]
pub struct StateSolution {
    pub u: Vec<f64>,
    pub mean: f64,
}

/// Builds the prepared solver for `A(μ)`.
pub fn state_solver(
    mu: &DensityField,
    delta: f64,
    k: &CellStiffnessSet,
    cfg: &SolverConfig,
) -> Result<SpsdSolver> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    if mu.len() != k.n_cells() {
        return Err(Error::InvalidArgument(format!(
            "density has {} entries, mesh has {} cells",
            mu.len(),
            k.n_cells()
        )));
    }
    mu.check_feasible()?;
    SpsdSolver::new(k.operator(mu.values(), delta), cfg)
}

/// Solves `A(μ) u = f` on the zero-mean subspace.
pub fn solve_state(
    mu: &DensityField,
    delta: f64,
    k: &CellStiffnessSet,
    f: &LoadVector,
    cfg: &SolverConfig,
) -> Result<StateSolution> {
    if f.values.len() != k.n_dofs() {
        return Err(Error::InvalidArgument(format!(
            "load has {} entries, expected {}",
            f.values.len(),
            k.n_dofs()
        )));
    }
    let solver = state_solver(mu, delta, k, cfg)?;
    let u = solver.solve(&f.values)?;
    let mean = weighted_mean(&u, k.vertex_masses());
    Ok(StateSolution { u, mean })
}

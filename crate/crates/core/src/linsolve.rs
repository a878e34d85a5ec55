//! Solvers for symmetric positive semidefinite systems whose kernel is the
//! constants, as produced by P1 stiffness matrices with natural boundary
//! conditions.
//!
//! Solutions are always returned with zero weighted mean `wᵀx = 0`, where `w`
//! holds the lumped vertex masses. Two paths are available:
//!
//! * a sparse Cholesky factorization of the matrix with one diagonal entry
//!   augmented by a rank-one term, followed by exact mean projection;
//! * preconditioned conjugate gradients with the residual deflated against the
//!   kernel at every iteration.

use std::sync::{Arc, OnceLock};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{MatMut, Side};

use crate::error::{Error, Result};

/// Relative defect `|Σ b| / Σ |b|` above which a right-hand side is rejected.
pub const COMPATIBILITY_TOL: f64 = 1e-10;

/// Column-compressed sparsity pattern of a symmetric matrix, both triangles
/// stored, rows sorted within each column.
#[derive(Debug)]
pub struct SparsityPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    diag: Vec<usize>,
    symbolic: OnceLock<std::result::Result<SymbolicLlt<usize>, String>>,
}

impl SparsityPattern {
    /// Builds a pattern from (row, col) pairs; duplicates are merged and the
    /// diagonal is always present.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = (0..n).map(|j| vec![j]).collect();
        for (r, c) in entries {
            cols[c].push(r);
            cols[r].push(c);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut diag = Vec::with_capacity(n);
        col_ptr.push(0);
        for (j, col) in cols.iter_mut().enumerate() {
            col.sort_unstable();
            col.dedup();
            for &r in col.iter() {
                if r == j {
                    diag.push(row_idx.len());
                }
                row_idx.push(r);
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            n,
            col_ptr,
            row_idx,
            diag,
            symbolic: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage slot of entry `(row, col)`, if present.
    pub fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        self.row_idx[range.clone()]
            .binary_search(&row)
            .ok()
            .map(|k| range.start + k)
    }

    fn symbolic(&self) -> Result<SymbolicLlt<usize>> {
        self.symbolic
            .get_or_init(|| {
                let sym = SymbolicSparseColMat::new_checked(
                    self.n,
                    self.n,
                    self.col_ptr.clone(),
                    None,
                    self.row_idx.clone(),
                );
                SymbolicLlt::try_new(sym.as_ref(), Side::Upper).map_err(|e| format!("{e:?}"))
            })
            .clone()
            .map_err(|msg| Error::NumericalFailure {
                context: format!("symbolic factorization ({msg})"),
                residual: f64::NAN,
            })
    }
}

/// Symmetric sparse matrix over a shared [`SparsityPattern`].
#[derive(Debug, Clone)]
pub struct SymmetricMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern.slot(row, col).map_or(0.0, |s| self.values[s])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.pattern.diag.iter().map(|&s| self.values[s]).collect()
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in p.col_ptr[j]..p.col_ptr[j + 1] {
                acc += self.values[s] * x[p.row_idx[s]];
            }
            *yj = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        let p = &self.pattern;
        for j in 0..n {
            for s in p.col_ptr[j]..p.col_ptr[j + 1] {
                d[p.row_idx[s]][j] = self.values[s];
            }
        }
        d
    }
}

/// A symmetric positive semidefinite operator whose kernel is spanned by the
/// constant vector.
pub trait KernelAwareOperator {
    fn dim(&self) -> usize;

    fn apply(&self, x: &[f64], y: &mut [f64]);

    /// Weights of the mean functional that fixes the kernel component.
    fn mean_weights(&self) -> &[f64];

    /// Diagonal used for Jacobi preconditioning, if known.
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }

    /// Concrete matrix backing the operator, enabling the direct path.
    fn matrix(&self) -> Option<&SymmetricMatrix> {
        None
    }
}

/// A [`SymmetricMatrix`] paired with the vertex masses defining the mean.
#[derive(Debug, Clone)]
pub struct NeumannOperator {
    pub matrix: SymmetricMatrix,
    pub weights: Arc<Vec<f64>>,
}

impl KernelAwareOperator for NeumannOperator {
    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.apply(x, y)
    }

    fn mean_weights(&self) -> &[f64] {
        &self.weights
    }

    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.matrix.diagonal())
    }

    fn matrix(&self) -> Option<&SymmetricMatrix> {
        Some(&self.matrix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    /// Direct factorization up to `direct_max_dim` unknowns, CG above.
    Auto,
    Direct,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub direct_max_dim: usize,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
    /// Iterative refinement sweeps applied after a direct solve.
    pub refinement_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Auto,
            direct_max_dim: 100_000,
            cg_rel_tol: 1e-12,
            cg_max_iter: 50_000,
            refinement_steps: 1,
        }
    }
}

impl SolverConfig {
    fn use_direct(&self, n: usize, has_matrix: bool) -> bool {
        match self.kind {
            SolverKind::Direct => has_matrix,
            SolverKind::Iterative => false,
            SolverKind::Auto => has_matrix && n <= self.direct_max_dim,
        }
    }
}

/// Projects `x` onto the zero weighted-mean subspace.
pub fn remove_mean(x: &mut [f64], weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    let mean = x.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / total;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// Weighted mean `wᵀx / Σw`.
pub fn weighted_mean(x: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    x.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / total
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the rhs deflated against the constants, or an error if its defect
/// exceeds [`COMPATIBILITY_TOL`]. `None` means the rhs is identically zero.
fn compatible_rhs(rhs: &[f64]) -> Result<Option<Vec<f64>>> {
    let abs: f64 = rhs.iter().map(|v| v.abs()).sum();
    if abs == 0.0 {
        return Ok(None);
    }
    let sum: f64 = rhs.iter().sum();
    let defect = sum.abs() / abs;
    if defect > COMPATIBILITY_TOL || !defect.is_finite() {
        return Err(Error::Compatibility { defect });
    }
    let shift = sum / rhs.len() as f64;
    Ok(Some(rhs.iter().map(|v| v - shift).collect()))
}

/// Solves `A x = b` on the zero-mean subspace. Builds a fresh factorization
/// when the direct path applies; use [`SpsdSolver`] to reuse one.
pub fn solve_spsd(
    op: &dyn KernelAwareOperator,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let cfg = SolverConfig {
        cg_rel_tol: tol,
        cg_max_iter: max_iter,
        ..SolverConfig::default()
    };
    if cfg.use_direct(op.dim(), op.matrix().is_some()) {
        let matrix = op.matrix().expect("checked").clone();
        let weights = Arc::new(op.mean_weights().to_vec());
        DirectFactor::new(matrix, weights, cfg.refinement_steps)?.solve(rhs)
    } else {
        projected_cg(op, rhs, tol, max_iter)
    }
}

/// Jacobi-preconditioned conjugate gradients, deflated against the constants.
pub fn projected_cg(
    op: &dyn KernelAwareOperator,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = op.dim();
    let Some(b) = compatible_rhs(rhs)? else {
        return Ok(vec![0.0; n]);
    };
    let inv_diag: Vec<f64> = match op.diagonal() {
        Some(d) => d
            .iter()
            .map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 })
            .collect(),
        None => vec![1.0; n],
    };
    let deflate = |v: &mut [f64]| {
        let s = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= s);
    };
    let bnorm = norm(&b);
    let mut x = vec![0.0; n];
    let mut r = b;
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = norm(&r) / bnorm;
    for _ in 0..max_iter {
        if res <= tol {
            break;
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        deflate(&mut r);
        res = norm(&r) / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res > tol || !res.is_finite() {
        return Err(Error::NumericalFailure {
            context: "projected conjugate gradients".into(),
            residual: res,
        });
    }
    remove_mean(&mut x, op.mean_weights());
    Ok(x)
}

/// Sparse Cholesky factorization of `A + c e_p e_pᵀ`.
///
/// For a compatible rhs the augmented system returns a solution of `A x = b`
/// with `x_p = 0`; the kernel component is then fixed by mean projection.
pub struct DirectFactor {
    matrix: SymmetricMatrix,
    weights: Arc<Vec<f64>>,
    llt: Llt<usize, f64>,
    refinement_steps: usize,
}

impl std::fmt::Debug for DirectFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirectFactor")
            .field("dim", &self.matrix.dim())
            .finish()
    }
}

impl DirectFactor {
    pub fn new(
        matrix: SymmetricMatrix,
        weights: Arc<Vec<f64>>,
        refinement_steps: usize,
    ) -> Result<Self> {
        let pattern = matrix.pattern().clone();
        let symbolic = pattern.symbolic()?;
        let mut aug = matrix.values().to_vec();
        let anchor = pattern.diag[0];
        let scale = matrix.diagonal().into_iter().fold(0.0f64, f64::max);
        aug[anchor] += if scale > 0.0 { scale } else { 1.0 };
        let sym = SymbolicSparseColMat::new_checked(
            pattern.n,
            pattern.n,
            pattern.col_ptr.clone(),
            None,
            pattern.row_idx.clone(),
        );
        let view = SparseColMatRef::new(sym.as_ref(), &aug);
        let llt = Llt::try_new_with_symbolic(symbolic, view, Side::Upper).map_err(|e| {
            Error::NumericalFailure {
                context: format!("sparse Cholesky ({e:?})"),
                residual: f64::NAN,
            }
        })?;
        Ok(Self {
            matrix,
            weights,
            llt,
            refinement_steps,
        })
    }

    pub fn matrix(&self) -> &SymmetricMatrix {
        &self.matrix
    }

    fn raw_solve(&self, x: &mut [f64]) {
        let n = x.len();
        let view = MatMut::from_column_major_slice_mut(x, n, 1);
        self.llt.solve_in_place(view);
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.dim();
        let Some(b) = compatible_rhs(rhs)? else {
            return Ok(vec![0.0; n]);
        };
        let mut x = b.clone();
        self.raw_solve(&mut x);
        remove_mean(&mut x, &self.weights);
        let mut ax = vec![0.0; n];
        for _ in 0..self.refinement_steps {
            self.matrix.apply(&x, &mut ax);
            let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let s = r.iter().sum::<f64>() / n as f64;
            r.iter_mut().for_each(|v| *v -= s);
            self.raw_solve(&mut r);
            for (xi, di) in x.iter_mut().zip(&r) {
                *xi += di;
            }
            remove_mean(&mut x, &self.weights);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                context: "sparse Cholesky solve".into(),
                residual: f64::INFINITY,
            });
        }
        Ok(x)
    }
}

/// A solver prepared for repeated solves with one operator.
#[derive(Debug)]
pub enum SpsdSolver {
    Direct(DirectFactor),
    Iterative {
        op: NeumannOperator,
        tol: f64,
        max_iter: usize,
    },
}

impl SpsdSolver {
    pub fn new(op: NeumannOperator, cfg: &SolverConfig) -> Result<Self> {
        if cfg.use_direct(op.dim(), true) {
            Ok(SpsdSolver::Direct(DirectFactor::new(
                op.matrix,
                op.weights,
                cfg.refinement_steps,
            )?))
        } else {
            Ok(SpsdSolver::Iterative {
                op,
                tol: cfg.cg_rel_tol,
                max_iter: cfg.cg_max_iter,
            })
        }
    }

    pub fn matrix(&self) -> &SymmetricMatrix {
        match self {
            SpsdSolver::Direct(d) => d.matrix(),
            SpsdSolver::Iterative { op, .. } => &op.matrix,
        }
    }

    pub fn is_direct(&self) -> bool {
        matches!(self, SpsdSolver::Direct(_))
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            SpsdSolver::Direct(d) => d.solve(rhs),
            SpsdSolver::Iterative { op, tol, max_iter } => projected_cg(op, rhs, *tol, *max_iter),
        }
    }
}

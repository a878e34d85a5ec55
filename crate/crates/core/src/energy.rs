//! Transport energy `E(μ) = fᵀu(μ) + Σ μ_i |T_i|`, its square-map pull-back
//! `F(σ) = E(σ²)` and the proximal objective of one implicit Euler step.
//!
//! Derivatives use the unnormalized coordinates: `∂_i E = |T_i| − uᵀA^(i)u`
//! and `∂_i∂_j E = 2 (A^(i)u)ᵀ A(μ)⁻¹ (A^(j)u)`.

use std::sync::Arc;

use faer::Mat;

use crate::error::{Error, Result};
use crate::fem::{state_solver, CellStiffnessSet, LoadVector};
use crate::linsolve::{SolverConfig, SpsdSolver};

/// Largest parameter count for which dense Hessians are formed.
pub const DENSE_HESSIAN_MAX: usize = 4096;

/// Nonnegative P0 density on the coarse mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    mu: Vec<f64>,
    level: u32,
}

impl DensityField {
    pub fn new(mu: Vec<f64>, level: u32) -> Result<Self> {
        let d = Self { mu, level };
        d.check_feasible()?;
        Ok(d)
    }

    /// Wraps values without checking feasibility.
    pub fn from_raw(mu: Vec<f64>, level: u32) -> Self {
        Self { mu, level }
    }

    pub fn zeros(n: usize, level: u32) -> Self {
        Self::from_raw(vec![0.0; n], level)
    }

    pub fn constant(n: usize, value: f64, level: u32) -> Result<Self> {
        Self::new(vec![value; n], level)
    }

    pub fn check_feasible(&self) -> Result<()> {
        match self.mu.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            Some(i) => Err(Error::Domain(format!("mu[{i}] = {}", self.mu[i]))),
            None => Ok(()),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    pub fn into_values(self) -> Vec<f64> {
        self.mu
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Signed square-root coordinates, `μ = σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaField {
    sigma: Vec<f64>,
    level: u32,
}

impl SigmaField {
    pub fn new(sigma: Vec<f64>, level: u32) -> Result<Self> {
        if let Some(i) = sigma.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("sigma[{i}] = {}", sigma[i])));
        }
        Ok(Self { sigma, level })
    }

    /// Wraps values already known to be finite.
    pub fn from_trusted(sigma: Vec<f64>, level: u32) -> Self {
        Self { sigma, level }
    }

    pub fn values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn into_values(self) -> Vec<f64> {
        self.sigma
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn square(&self) -> DensityField {
        DensityField::from_raw(self.sigma.iter().map(|s| s * s).collect(), self.level)
    }
}

/// Everything needed to evaluate `E` on one mesh level.
#[derive(Debug, Clone)]
pub struct EnergyContext {
    pub stiffness: Arc<CellStiffnessSet>,
    pub load: LoadVector,
    pub areas: Vec<f64>,
    pub delta: f64,
    pub solver: SolverConfig,
    pub level: u32,
}

impl EnergyContext {
    pub fn new(
        stiffness: Arc<CellStiffnessSet>,
        load: LoadVector,
        areas: Vec<f64>,
        delta: f64,
        solver: SolverConfig,
        level: u32,
    ) -> Result<Self> {
        if areas.len() != stiffness.n_cells() {
            return Err(Error::InvalidArgument(format!(
                "{} areas for {} cells",
                areas.len(),
                stiffness.n_cells()
            )));
        }
        if load.values.len() != stiffness.n_dofs() {
            return Err(Error::InvalidArgument(format!(
                "load of length {} for {} dofs",
                load.values.len(),
                stiffness.n_dofs()
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(Self {
            stiffness,
            load,
            areas,
            delta,
            solver,
            level,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.areas.len()
    }

    /// Same context with zero forcing.
    pub fn with_zero_load(&self) -> Self {
        Self {
            load: LoadVector::zeros(self.load.values.len()),
            ..self.clone()
        }
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.n_cells() {
            return Err(Error::InvalidArgument(format!(
                "{what} has {n} entries, expected {}",
                self.n_cells()
            )));
        }
        Ok(())
    }

    /// Solves the state equation at `μ` and caches the derived quantities.
    pub fn evaluate(&self, mu: &DensityField) -> Result<StateEval> {
        self.check_len(mu.len(), "density")?;
        let solver = state_solver(mu, self.delta, &self.stiffness, &self.solver)?;
        let u = solver.solve(&self.load.values)?;
        let blocks = self.stiffness.blocks();
        let au: Vec<[f64; 6]> = blocks.iter().map(|b| b.apply_local(&u)).collect();
        let grad: Vec<f64> = blocks
            .iter()
            .zip(&au)
            .zip(&self.areas)
            .map(|((b, a), area)| {
                let q: f64 = (0..6).map(|k| u[b.dofs[k]] * a[k]).sum();
                area - q
            })
            .collect();
        let fu: f64 = self.load.values.iter().zip(&u).map(|(a, b)| a * b).sum();
        let mass: f64 = mu.values().iter().zip(&self.areas).map(|(m, a)| m * a).sum();
        Ok(StateEval {
            mu: mu.values().to_vec(),
            solver,
            u,
            au,
            grad,
            energy: fu + mass,
        })
    }

    pub fn evaluate_sigma(&self, sigma: &SigmaField) -> Result<StateEval> {
        self.evaluate(&sigma.square())
    }

    fn scatter(&self, coeff: impl Fn(usize) -> f64, au: &[[f64; 6]]) -> Vec<f64> {
        let mut rhs = vec![0.0; self.stiffness.n_dofs()];
        for (i, (b, a)) in self.stiffness.blocks().iter().zip(au).enumerate() {
            let c = coeff(i);
            if c != 0.0 {
                for k in 0..6 {
                    rhs[b.dofs[k]] += c * a[k];
                }
            }
        }
        rhs
    }
}

/// State solution at one `μ` with a reusable operator factorization.
#[derive(Debug)]
pub struct StateEval {
    mu: Vec<f64>,
    solver: SpsdSolver,
    u: Vec<f64>,
    au: Vec<[f64; 6]>,
    grad: Vec<f64>,
    energy: f64,
}

impl StateEval {
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// `∂_i E`.
    pub fn grad_e(&self) -> &[f64] {
        &self.grad
    }

    /// `2σ_i ∂_i E`.
    pub fn grad_f(&self, sigma: &[f64]) -> Vec<f64> {
        sigma.iter().zip(&self.grad).map(|(s, g)| 2.0 * s * g).collect()
    }

    /// `Hess F(σ) v` via one additional solve.
    pub fn hess_f_vec(&self, ctx: &EnergyContext, sigma: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let rhs = ctx.scatter(|j| 2.0 * sigma[j] * v[j], &self.au);
        let w = self.solver.solve(&rhs)?;
        Ok(ctx
            .stiffness
            .blocks()
            .iter()
            .zip(&self.au)
            .enumerate()
            .map(|(i, (b, a))| {
                let aw: f64 = (0..6).map(|k| a[k] * w[b.dofs[k]]).sum();
                2.0 * sigma[i] * aw * 2.0 + 2.0 * v[i] * self.grad[i]
            })
            .collect())
    }

    /// Dense `Hess E(μ)`, one solve per column.
    pub fn hess_e_dense(&self, ctx: &EnergyContext) -> Result<Mat<f64>> {
        let n = ctx.n_cells();
        if n > DENSE_HESSIAN_MAX {
            return Err(Error::Capacity {
                n,
                max: DENSE_HESSIAN_MAX,
            });
        }
        let blocks = ctx.stiffness.blocks();
        let mut h = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            let rhs = ctx.scatter(|i| if i == j { 1.0 } else { 0.0 }, &self.au);
            let w = self.solver.solve(&rhs)?;
            for i in 0..=j {
                let a = &self.au[i];
                let b = &blocks[i];
                let v: f64 = 2.0 * (0..6).map(|k| a[k] * w[b.dofs[k]]).sum::<f64>();
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    }

    /// Dense `Hess F(σ) = 4 σ_i σ_j ∂²E + 2 diag(∂E)`.
    pub fn hess_f_dense(&self, ctx: &EnergyContext, sigma: &[f64]) -> Result<Mat<f64>> {
        let mut h = self.hess_e_dense(ctx)?;
        let n = h.nrows();
        for j in 0..n {
            for i in 0..n {
                h[(i, j)] *= 4.0 * sigma[i] * sigma[j];
            }
            h[(j, j)] += 2.0 * self.grad[j];
        }
        Ok(h)
    }
}

pub fn energy_e(mu: &DensityField, ctx: &EnergyContext) -> Result<f64> {
    Ok(ctx.evaluate(mu)?.energy)
}

pub fn grad_e(mu: &DensityField, ctx: &EnergyContext) -> Result<Vec<f64>> {
    Ok(ctx.evaluate(mu)?.grad)
}

pub fn energy_f(sigma: &SigmaField, ctx: &EnergyContext) -> Result<f64> {
    energy_e(&sigma.square(), ctx)
}

pub fn grad_f(sigma: &SigmaField, ctx: &EnergyContext) -> Result<Vec<f64>> {
    ctx.check_len(sigma.len(), "sigma")?;
    Ok(ctx.evaluate_sigma(sigma)?.grad_f(sigma.values()))
}

pub fn hess_e_dense(mu: &DensityField, ctx: &EnergyContext) -> Result<Mat<f64>> {
    if mu.len() > DENSE_HESSIAN_MAX {
        return Err(Error::Capacity {
            n: mu.len(),
            max: DENSE_HESSIAN_MAX,
        });
    }
    ctx.evaluate(mu)?.hess_e_dense(ctx)
}

pub fn hess_f_dense(sigma: &SigmaField, ctx: &EnergyContext) -> Result<Mat<f64>> {
    if sigma.len() > DENSE_HESSIAN_MAX {
        return Err(Error::Capacity {
            n: sigma.len(),
            max: DENSE_HESSIAN_MAX,
        });
    }
    ctx.evaluate_sigma(sigma)?.hess_f_dense(ctx, sigma.values())
}

pub fn hess_f_vec(sigma: &SigmaField, v: &[f64], ctx: &EnergyContext) -> Result<Vec<f64>> {
    ctx.check_len(sigma.len(), "sigma")?;
    ctx.check_len(v.len(), "direction")?;
    ctx.evaluate_sigma(sigma)?.hess_f_vec(ctx, sigma.values(), v)
}

/// Least-norm element of the subdifferential of `E + ι_{μ ≥ 0}`.
pub fn minimal_subdifferential_from(mu: &[f64], grad: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(grad)
        .map(|(&m, &g)| if m > 0.0 { g } else { -(-g).max(0.0) })
        .collect()
}

pub fn minimal_subdifferential(mu: &DensityField, ctx: &EnergyContext) -> Result<Vec<f64>> {
    let g = grad_e(mu, ctx)?;
    Ok(minimal_subdifferential_from(mu.values(), &g))
}

/// Thresholded KKT residual for precomputed `∂E`.
pub fn kkt_residual_from(mu: &[f64], grad: &[f64], toll: f64) -> f64 {
    mu.iter()
        .zip(grad)
        .map(|(&m, &g)| if m < toll { (-g).max(0.0) } else { g.abs() })
        .fold(0.0, f64::max)
}

pub fn kkt_residual(mu: &DensityField, ctx: &EnergyContext, toll: f64) -> Result<f64> {
    let g = grad_e(mu, ctx)?;
    Ok(kkt_residual_from(mu.values(), &g, toll))
}

/// The implicit Euler objective `G(σ) = F(σ) + ‖σ − σ_old‖² / (2τ)`.
#[derive(Debug, Clone, Copy)]
pub struct ProxObjective<'a> {
    pub sigma_old: &'a [f64],
    pub tau: f64,
}

impl ProxObjective<'_> {
    pub fn value(&self, sigma: &[f64], eval: &StateEval) -> f64 {
        let d: f64 = sigma
            .iter()
            .zip(self.sigma_old)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        eval.energy + d / (2.0 * self.tau)
    }

    pub fn grad(&self, sigma: &[f64], eval: &StateEval) -> Vec<f64> {
        eval.grad_f(sigma)
            .into_iter()
            .zip(sigma.iter().zip(self.sigma_old))
            .map(|(g, (s, o))| g + (s - o) / self.tau)
            .collect()
    }

    pub fn hess_vec(
        &self,
        ctx: &EnergyContext,
        sigma: &[f64],
        eval: &StateEval,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        let mut hv = eval.hess_f_vec(ctx, sigma, v)?;
        for (h, x) in hv.iter_mut().zip(v) {
            *h += x / self.tau;
        }
        Ok(hv)
    }
}

pub fn prox_objective_g(
    sigma: &SigmaField,
    sigma_old: &SigmaField,
    tau: f64,
    ctx: &EnergyContext,
) -> Result<f64> {
    let eval = ctx.evaluate_sigma(sigma)?;
    Ok(ProxObjective {
        sigma_old: sigma_old.values(),
        tau,
    }
    .value(sigma.values(), &eval))
}

pub fn grad_g(
    sigma: &SigmaField,
    sigma_old: &SigmaField,
    tau: f64,
    ctx: &EnergyContext,
) -> Result<Vec<f64>> {
    let eval = ctx.evaluate_sigma(sigma)?;
    Ok(ProxObjective {
        sigma_old: sigma_old.values(),
        tau,
    }
    .grad(sigma.values(), &eval))
}

pub fn hess_g_vec(
    sigma: &SigmaField,
    sigma_old: &SigmaField,
    tau: f64,
    v: &[f64],
    ctx: &EnergyContext,
) -> Result<Vec<f64>> {
    let eval = ctx.evaluate_sigma(sigma)?;
    ProxObjective {
        sigma_old: sigma_old.values(),
        tau,
    }
    .hess_vec(ctx, sigma.values(), &eval, v)
}

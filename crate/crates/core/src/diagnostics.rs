//! Extremal eigenvalues of `Hess F` at a computed optimum and the
//! a-posteriori conditioning surrogate.

use faer::Side;

use crate::energy::{EnergyContext, SigmaField, DENSE_HESSIAN_MAX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumMethod {
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub method: SpectrumMethod,
    pub level: u32,
    pub delta: f64,
    /// False when the iterative estimate hit its iteration cap before the
    /// Ritz residuals met the tolerance.
    pub converged: bool,
    pub iterations: usize,
}

/// Controls for the Lanczos estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanczosOptions {
    pub max_iter: usize,
    /// Ritz residual relative to the magnitude of each extremal Ritz value.
    pub rel_tol: f64,
    pub check_every: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            max_iter: 3000,
            rel_tol: 1e-8,
            check_every: 10,
        }
    }
}

/// Dense eigendecomposition up to [`DENSE_HESSIAN_MAX`] cells, Lanczos above.
pub fn hess_f_extremal_eigs(sigma: &SigmaField, ctx: &EnergyContext) -> Result<SpectrumReport> {
    if sigma.len() <= DENSE_HESSIAN_MAX {
        dense_extremal_eigs(sigma, ctx)
    } else {
        lanczos_extremal_eigs(sigma, ctx, &LanczosOptions::default())
    }
}

pub fn dense_extremal_eigs(sigma: &SigmaField, ctx: &EnergyContext) -> Result<SpectrumReport> {
    let eval = ctx.evaluate_sigma(sigma)?;
    let h = eval.hess_f_dense(ctx, sigma.values())?;
    let eig = h
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::NumericalFailure {
            context: format!("dense eigensolver ({e:?})"),
            residual: f64::NAN,
        })?;
    Ok(SpectrumReport {
        lambda_min: eig[0],
        lambda_max: eig[eig.len() - 1],
        method: SpectrumMethod::Dense,
        level: ctx.level,
        delta: ctx.delta,
        converged: true,
        iterations: 0,
    })
}

/// Lanczos with full reorthogonalization on Hessian-vector products.
pub fn lanczos_extremal_eigs(
    sigma: &SigmaField,
    ctx: &EnergyContext,
    opts: &LanczosOptions,
) -> Result<SpectrumReport> {
    let n = sigma.len();
    let eval = ctx.evaluate_sigma(sigma)?;
    let apply = |v: &[f64]| eval.hess_f_vec(ctx, sigma.values(), v);
    let (lmin, lmax, converged, iterations) = lanczos(n, apply, opts)?;
    Ok(SpectrumReport {
        lambda_min: lmin,
        lambda_max: lmax,
        method: SpectrumMethod::Iterative,
        level: ctx.level,
        delta: ctx.delta,
        converged,
        iterations,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(λ_min, λ_max, converged, iterations)` of a symmetric operator.
pub fn lanczos(
    n: usize,
    apply: impl Fn(&[f64]) -> Result<Vec<f64>>,
    opts: &LanczosOptions,
) -> Result<(f64, f64, bool, usize)> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty operator".into()));
    }
    // deterministic start with energy in every coordinate
    let mut q: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7548776662).sin()).collect();
    let s = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|v| *v /= s);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let max_iter = opts.max_iter.min(n).max(1);
    let mut last = (f64::NAN, f64::NAN);
    for j in 0..max_iter {
        let mut w = apply(&basis[j])?;
        let a = dot(&basis[j], &w);
        alpha.push(a);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        let bnorm = dot(&w, &w).sqrt();
        let scale = alpha.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        let breakdown = bnorm <= 1e-14 * scale;
        let k = j + 1;
        if breakdown || k == max_iter || k % opts.check_every == 0 {
            let (lo, lo_res) = tridiagonal_extreme(&alpha, &beta, bnorm, false);
            let (hi, hi_res) = tridiagonal_extreme(&alpha, &beta, bnorm, true);
            last = (lo, hi);
            let ok = breakdown
                || (lo_res <= opts.rel_tol * lo.abs().max(1e-300)
                    && hi_res <= opts.rel_tol * hi.abs().max(1e-300));
            if ok {
                return Ok((lo, hi, true, k));
            }
            if k == max_iter {
                return Ok((lo, hi, false, k));
            }
        }
        beta.push(bnorm);
        basis.push(w.into_iter().map(|v| v / bnorm).collect());
    }
    Ok((last.0, last.1, false, max_iter))
}

/// Number of eigenvalues of the tridiagonal matrix below `x` (Sturm count).
fn sturm_count(alpha: &[f64], beta: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0f64;
    for i in 0..alpha.len() {
        let b2 = if i == 0 { 0.0 } else { beta[i - 1] * beta[i - 1] };
        d = alpha[i] - x - if i == 0 { 0.0 } else { b2 / d };
        if d == 0.0 {
            d = -1e-300;
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Extremal eigenvalue of the Lanczos tridiagonal and its Ritz residual
/// `β_k |s_k|`.
fn tridiagonal_extreme(alpha: &[f64], beta: &[f64], beta_next: f64, largest: bool) -> (f64, f64) {
    let m = alpha.len();
    let radius = (0..m)
        .map(|i| {
            let l = if i > 0 { beta[i - 1].abs() } else { 0.0 };
            let r = if i + 1 < m { beta[i].abs() } else { 0.0 };
            (alpha[i] - l - r, alpha[i] + l + r)
        })
        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, (a, b)| (acc.0.min(a), acc.1.max(b)));
    let (mut lo, mut hi) = radius;
    let target = if largest { m - 1 } else { 0 };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(alpha, beta, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    // inverse iteration for the last eigenvector component
    let shift = lambda + 1e-14 * lambda.abs().max(1e-300) * if largest { 1.0 } else { -1.0 };
    let mut x = vec![1.0; m];
    for _ in 0..3 {
        x = thomas(alpha, beta, shift, &x);
        let s = dot(&x, &x).sqrt();
        if !(s.is_finite() && s > 0.0) {
            return (lambda, f64::INFINITY);
        }
        x.iter_mut().for_each(|v| *v /= s);
    }
    (lambda, beta_next * x[m - 1].abs())
}

/// Solves `(T − shift I) x = b` for the symmetric tridiagonal `T`.
fn thomas(alpha: &[f64], beta: &[f64], shift: f64, b: &[f64]) -> Vec<f64> {
    let m = alpha.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let tiny = 1e-300;
    let mut piv = alpha[0] - shift;
    if piv.abs() < tiny {
        piv = tiny;
    }
    if m > 1 {
        c[0] = beta[0] / piv;
    }
    d[0] = b[0] / piv;
    for i in 1..m {
        let mut p = alpha[i] - shift - beta[i - 1] * c[i - 1];
        if p.abs() < tiny {
            p = tiny;
        }
        if i + 1 < m {
            c[i] = beta[i] / p;
        }
        d[i] = (b[i] - beta[i - 1] * d[i - 1]) / p;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = d[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// `(16 / Λ) · max |∂_i E(σ²)|` over the active cells `σ_i² > active_toll`.
///
/// With `active_toll = 0` every nonzero `σ_i` counts. A flow only drives
/// inactive components to zero asymptotically, so at a computed optimum a
/// threshold such as the KKT one is needed to separate the two sets.
pub fn condition_estimate(
    sigma: &SigmaField,
    ctx: &EnergyContext,
    lambda: f64,
    active_toll: f64,
) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("Lambda must be positive, got {lambda}")));
    }
    let eval = ctx.evaluate_sigma(sigma)?;
    let worst = sigma
        .values()
        .iter()
        .zip(eval.grad_e())
        .filter(|(s, _)| **s != 0.0 && *s * *s > active_toll)
        .map(|(_, g)| g.abs())
        .fold(0.0, f64::max);
    Ok(16.0 / lambda * worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsolve::SolverConfig;
    use crate::problems::{DeltaRule, RectTransportProblem};

    #[test]
    fn diagonal_case() {
        let ctx = RectTransportProblem::benchmark()
            .context(8, 0, DeltaRule::H2, SolverConfig::default())
            .unwrap()
            .with_zero_load();
        let s = SigmaField::new(vec![0.0; ctx.n_cells()], 0).unwrap();
        let min_a = ctx.areas.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_a = ctx.areas.iter().cloned().fold(0.0, f64::max);
        for rep in [
            dense_extremal_eigs(&s, &ctx).unwrap(),
            lanczos_extremal_eigs(&s, &ctx, &LanczosOptions::default()).unwrap(),
        ] {
            assert!((rep.lambda_min - 2.0 * min_a).abs() < 1e-14);
            assert!((rep.lambda_max - 2.0 * max_a).abs() < 1e-14);
            assert!(rep.converged);
        }
        assert_eq!(condition_estimate(&s, &ctx, 1.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn lanczos_on_known_spectrum() {
        let n = 300;
        let diag: Vec<f64> = (0..n).map(|i| 1e-4 + i as f64 * 0.01).collect();
        let (lo, hi, ok, _) = lanczos(
            n,
            |v| Ok(v.iter().zip(&diag).map(|(a, b)| a * b).collect()),
            &LanczosOptions::default(),
        )
        .unwrap();
        assert!(ok);
        assert!((lo - 1e-4).abs() <= 1e-10);
        assert!((hi - diag[n - 1]).abs() <= 1e-10);
    }

    #[test]
    fn condition_estimate_scales() {
        let ctx = RectTransportProblem::benchmark()
            .context(8, 0, DeltaRule::H2, SolverConfig::default())
            .unwrap();
        let s = SigmaField::new(vec![0.5; ctx.n_cells()], 0).unwrap();
        let a = condition_estimate(&s, &ctx, 1.0, 0.0).unwrap();
        let b = condition_estimate(&s, &ctx, 2.0, 0.0).unwrap();
        assert!(a > 0.0);
        assert!((a - 2.0 * b).abs() <= 1e-15 * a);
    }
}

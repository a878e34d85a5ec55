//! Gradient-flow drivers: projected explicit Euler on `E`, implicit Euler on
//! `F` with an inner Newton solve, and its adaptive variant with geometric
//! time-step growth and restarts.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};

use crate::energy::{
    kkt_residual_from, DensityField, EnergyContext, ProxObjective, SigmaField, StateEval,
};
use crate::error::{Error, Result};

/// Parameters shared by the three drivers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub tau0: f64,
    pub alpha: f64,
    pub eps: f64,
    pub toll: f64,
    pub n_step: usize,
    pub r_max: usize,
    pub kkt_toll: f64,
    /// Above this many cells the Newton systems are solved by CG on
    /// Hessian-vector products instead of a dense factorization.
    pub newton_dense_max: usize,
    pub newton_cg_max_iter: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            alpha: 1.2,
            eps: 1e-8,
            toll: 1e-9,
            n_step: 10_000,
            r_max: 20,
            kkt_toll: 1e-8,
            newton_dense_max: 128,
            newton_cg_max_iter: 2000,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau0", self.tau0),
            ("eps", self.eps),
            ("toll", self.toll),
            ("kkt_toll", self.kkt_toll),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be greater than 1, got {}", self.alpha)));
        }
        if self.n_step == 0 {
            return Err(Error::config("n_step", "must be at least 1"));
        }
        if self.r_max == 0 {
            return Err(Error::config("r_max", "must be at least 1"));
        }
        if self.newton_cg_max_iter == 0 {
            return Err(Error::config("newton_cg_max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// One accepted time step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub tau: f64,
    /// Area-weighted L² norm of the increment.
    pub delta_sigma: f64,
    /// Euclidean norm of `∇F` (of the explicit Euler direction for `alg1`).
    pub grad_norm: f64,
    pub kkt: f64,
    pub newton_iters: usize,
    pub restarts: usize,
    pub energy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowTrace {
    pub rows: Vec<TraceRow>,
    /// Outer stopping test satisfied before the step budget ran out.
    pub converged: bool,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn total_newton_iters(&self) -> usize {
        self.rows.iter().map(|r| r.newton_iters).sum()
    }

    pub fn total_restarts(&self) -> usize {
        self.rows.iter().map(|r| r.restarts).sum()
    }
}

/// `‖∇F(σ^ℓ)‖ ≤ τ_ℓ · toll` for the last row.
pub fn exit_criterion(trace: &FlowTrace, tau_l: f64, toll: f64) -> bool {
    trace
        .last()
        .is_some_and(|r| r.grad_norm <= tau_l * toll)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn weighted_increment(new: &[f64], old: &[f64], areas: &[f64]) -> f64 {
    new.iter()
        .zip(old)
        .zip(areas)
        .map(|((a, b), t)| t * (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Projected explicit Euler on `E` along `v_i = uᵀA^(i)u − |T_i|`, with
/// `v_i` clamped at zero where `μ_i = 0`.
pub fn projected_forward_euler(
    mu0: &DensityField,
    ctx: &EnergyContext,
    cfg: &FlowConfig,
) -> Result<(DensityField, FlowTrace)> {
    cfg.validate()?;
    mu0.check_feasible()?;
    let tau = cfg.tau0;
    let level = mu0.level();
    let mut mu = mu0.values().to_vec();
    let mut eval = ctx.evaluate(mu0)?;
    let mut trace = FlowTrace::default();
    for step in 1..=cfg.n_step + 1 {
        let v: Vec<f64> = eval
            .grad_e()
            .iter()
            .zip(&mu)
            .map(|(g, &m)| {
                let d = -g;
                if m == 0.0 {
                    d.max(0.0)
                } else {
                    d
                }
            })
            .collect();
        let err = norm(&v);
        if let Some(last) = trace.rows.last_mut() {
            last.grad_norm = err;
        }
        if err <= cfg.toll {
            trace.converged = true;
            break;
        }
        if step > cfg.n_step {
            break;
        }
        let next: Vec<f64> = mu.iter().zip(&v).map(|(m, d)| (m + tau * d).max(0.0)).collect();
        let next_eval = ctx.evaluate(&DensityField::from_raw(next.clone(), level))?;
        let before = eval.energy();
        let after = next_eval.energy();
        if after > before + 1e-12 * before.abs().max(1.0) {
            return Err(Error::StepSizeTooLarge {
                step,
                before,
                after,
            });
        }
        trace.rows.push(TraceRow {
            step,
            tau,
            delta_sigma: weighted_increment(&next, &mu, &ctx.areas),
            grad_norm: f64::NAN,
            kkt: kkt_residual_from(&next, next_eval.grad_e(), cfg.kkt_toll),
            newton_iters: 0,
            restarts: 0,
            energy: after,
        });
        mu = next;
        eval = next_eval;
    }
    Ok((DensityField::from_raw(mu, level), trace))
}

/// Relative size, against `‖2σ ⊙ |T|‖ + ‖σ‖/τ`, below which a stagnating
/// Newton residual is taken to be rounding noise.
pub const NEWTON_NOISE_REL: f64 = 1e-10;

/// Result of one accepted implicit Euler step.
#[derive(Debug)]
pub struct StepOutcome {
    pub sigma: Vec<f64>,
    pub newton_iters: usize,
    pub eval: StateEval,
}

fn signs_compatible(new: &[f64], old: &[f64]) -> bool {
    new.iter()
        .zip(old)
        .all(|(&a, &b)| a == 0.0 || b == 0.0 || (a > 0.0) == (b > 0.0))
}

fn newton_failure(iterations: usize, residual: f64, sign_flip: bool) -> Error {
    Error::NewtonFailure {
        iterations,
        residual,
        sign_flip,
    }
}

/// Solves `Hess G · d = rhs` for the current Newton iterate.
fn newton_direction(
    ctx: &EnergyContext,
    prox: &ProxObjective<'_>,
    sigma: &[f64],
    eval: &StateEval,
    rhs: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<f64>> {
    let n = sigma.len();
    if n <= cfg.newton_dense_max {
        return dense_newton_direction(ctx, prox, sigma, eval, rhs);
    }
    let gnorm = norm(rhs);
    let tol = 1e-3f64.min(gnorm.sqrt());
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = gnorm * gnorm;
    for _ in 0..cfg.newton_cg_max_iter {
        if rr.sqrt() <= tol * gnorm {
            return Ok(x);
        }
        let ap = prox.hess_vec(ctx, sigma, eval, &p)?;
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            // negative curvature: fall back to an exact solve when affordable
            if n <= crate::energy::DENSE_HESSIAN_MAX {
                return dense_newton_direction(ctx, prox, sigma, eval, rhs);
            }
            return Err(newton_failure(0, gnorm, false));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= tol * gnorm {
        Ok(x)
    } else {
        Err(Error::NumericalFailure {
            context: "Newton conjugate gradients".into(),
            residual: rr.sqrt() / gnorm,
        })
    }
}

fn dense_newton_direction(
    ctx: &EnergyContext,
    prox: &ProxObjective<'_>,
    sigma: &[f64],
    eval: &StateEval,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = sigma.len();
    let mut h = eval.hess_f_dense(ctx, sigma)?;
    for i in 0..n {
        h[(i, i)] += 1.0 / prox.tau;
    }
    let b = Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
    let x = match h.llt(Side::Lower) {
        Ok(llt) => llt.solve(&b),
        Err(_) => h.lblt(Side::Lower).solve(&b),
    };
    Ok((0..n).map(|i| x[(i, 0)]).collect())
}

/// Newton iteration on `∇G(·; σ_old, τ) = 0`, started from `σ_old`.
///
/// A step is accepted when every component satisfies
/// `|∂_i G| ≤ ε |σ_i − σ_old,i|` and no component changed sign.
pub fn newton_step(
    sigma_old: &[f64],
    eval_old: Option<StateEval>,
    tau: f64,
    ctx: &EnergyContext,
    cfg: &FlowConfig,
) -> Result<StepOutcome> {
    let level = ctx.level;
    let prox = ProxObjective { sigma_old, tau };
    let mut sigma = sigma_old.to_vec();
    let mut eval = match eval_old {
        Some(e) => e,
        None => ctx.evaluate_sigma(&SigmaField::new(sigma.clone(), level)?)?,
    };
    let mut grad = prox.grad(&sigma, &eval);
    let mut sign_flip = false;
    let mut prev_norm = norm(&grad);
    for r in 1..=cfg.r_max {
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let d = match newton_direction(ctx, &prox, &sigma, &eval, &rhs, cfg) {
            Ok(d) => d,
            Err(Error::NumericalFailure { residual, .. }) => {
                return Err(newton_failure(r, residual, sign_flip))
            }
            Err(Error::NewtonFailure { residual, .. }) => {
                return Err(newton_failure(r, residual, sign_flip))
            }
            Err(e) => return Err(e),
        };
        let trial: Vec<f64> = sigma.iter().zip(&d).map(|(s, di)| s + di).collect();
        if trial.iter().any(|v| !v.is_finite()) {
            return Err(newton_failure(r, f64::INFINITY, sign_flip));
        }
        sigma = trial;
        eval = ctx.evaluate_sigma(&SigmaField::from_trusted(sigma.clone(), level))?;
        grad = prox.grad(&sigma, &eval);
        sign_flip = !signs_compatible(&sigma, sigma_old);
        let small = grad
            .iter()
            .zip(sigma.iter().zip(sigma_old))
            .all(|(g, (s, o))| g.abs() <= cfg.eps * (s - o).abs());
        let gnorm = norm(&grad);
        let scale = norm(&sigma.iter().zip(&ctx.areas).map(|(s, a)| 2.0 * s * a).collect::<Vec<_>>())
            + norm(&sigma) / tau;
        let floor = r >= 2 && gnorm > 0.5 * prev_norm && gnorm <= NEWTON_NOISE_REL * scale;
        prev_norm = gnorm;
        if (small || floor) && !sign_flip {
            return Ok(StepOutcome {
                sigma,
                newton_iters: r,
                eval,
            });
        }
    }
    Err(newton_failure(cfg.r_max, norm(&grad), sign_flip))
}

/// One implicit Euler step; returns the new iterate and the Newton count.
pub fn backward_euler_step(
    sigma_old: &SigmaField,
    tau: f64,
    ctx: &EnergyContext,
    cfg: &FlowConfig,
) -> Result<(SigmaField, usize)> {
    if !(tau > 0.0) {
        return Err(Error::config("tau", format!("must be positive, got {tau}")));
    }
    let out = newton_step(sigma_old.values(), None, tau, ctx, cfg)?;
    Ok((SigmaField::from_trusted(out.sigma, sigma_old.level()), out.newton_iters))
}

fn start(sigma0: &SigmaField, ctx: &EnergyContext, cfg: &FlowConfig) -> Result<StateEval> {
    cfg.validate()?;
    if sigma0.len() != ctx.n_cells() {
        return Err(Error::InvalidArgument(format!(
            "sigma has {} entries, expected {}",
            sigma0.len(),
            ctx.n_cells()
        )));
    }
    let eval = ctx.evaluate_sigma(sigma0)?;
    let g = norm(&eval.grad_f(sigma0.values()));
    if g <= cfg.toll {
        return Err(Error::DegenerateStart { grad_norm: g });
    }
    Ok(eval)
}

fn record(
    trace: &mut FlowTrace,
    ctx: &EnergyContext,
    cfg: &FlowConfig,
    tau: f64,
    old: &[f64],
    out: &StepOutcome,
    restarts: usize,
) -> f64 {
    let grad_norm = norm(&out.eval.grad_f(&out.sigma));
    trace.rows.push(TraceRow {
        step: trace.rows.len() + 1,
        tau,
        delta_sigma: weighted_increment(&out.sigma, old, &ctx.areas),
        grad_norm,
        kkt: kkt_residual_from(out.eval.mu(), out.eval.grad_e(), cfg.kkt_toll),
        newton_iters: out.newton_iters,
        restarts,
        energy: out.eval.energy(),
    });
    grad_norm
}

/// Implicit Euler with fixed `τ = tau0`.
pub fn backward_euler_flow(
    sigma0: &SigmaField,
    ctx: &EnergyContext,
    cfg: &FlowConfig,
) -> Result<(SigmaField, FlowTrace)> {
    let mut eval = start(sigma0, ctx, cfg)?;
    let mut sigma = sigma0.values().to_vec();
    let mut trace = FlowTrace::default();
    for _ in 0..cfg.n_step {
        let out = newton_step(&sigma, Some(eval), cfg.tau0, ctx, cfg)?;
        let g = record(&mut trace, ctx, cfg, cfg.tau0, &sigma, &out, 0);
        sigma = out.sigma;
        eval = out.eval;
        if g <= cfg.toll {
            trace.converged = true;
            break;
        }
    }
    Ok((SigmaField::from_trusted(sigma, sigma0.level()), trace))
}

/// Adaptive implicit Euler: `τ ← α τ` before every step, `τ ← τ / α` and retry on Newton
/// failure.
pub fn adaptive_flow(
    sigma0: &SigmaField,
    ctx: &EnergyContext,
    cfg: &FlowConfig,
) -> Result<(SigmaField, FlowTrace)> {
    let mut eval = Some(start(sigma0, ctx, cfg)?);
    let mut sigma = sigma0.values().to_vec();
    let mut trace = FlowTrace::default();
    let mut tau = cfg.tau0;
    for _ in 0..cfg.n_step {
        tau *= cfg.alpha;
        let mut restarts = 0;
        let out = loop {
            match newton_step(&sigma, eval.take(), tau, ctx, cfg) {
                Ok(out) => break out,
                Err(Error::NewtonFailure { .. }) => {
                    tau /= cfg.alpha;
                    restarts += 1;
                    if tau < 1e-14 * cfg.tau0 {
                        return Err(Error::Stagnation { tau });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let g = record(&mut trace, ctx, cfg, tau, &sigma, &out, restarts);
        sigma = out.sigma;
        eval = Some(out.eval);
        if g <= cfg.toll {
            trace.converged = true;
            break;
        }
    }
    Ok((SigmaField::from_trusted(sigma, sigma0.level()), trace))
}

/// The three drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Projected explicit Euler on `E`.
    Alg1,
    /// Implicit Euler on `F` with fixed step.
    Alg2,
    /// Implicit Euler on `F` with geometric step growth.
    Alg3,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg2 => "alg2",
            Algorithm::Alg3 => "alg3",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(Algorithm::Alg1),
            "alg2" => Ok(Algorithm::Alg2),
            "alg3" => Ok(Algorithm::Alg3),
            other => Err(Error::config(
                "alg",
                format!("expected alg1, alg2 or alg3, got `{other}`"),
            )),
        }
    }
}

/// Final density and trace of a run.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub mu: DensityField,
    pub trace: FlowTrace,
}

/// Runs `alg` from the uniform density `μ ≡ 1`.
pub fn run_flow(alg: Algorithm, ctx: &EnergyContext, cfg: &FlowConfig) -> Result<FlowResult> {
    let n = ctx.n_cells();
    let level = ctx.level;
    match alg {
        Algorithm::Alg1 => {
            let (mu, trace) = projected_forward_euler(&DensityField::constant(n, 1.0, level)?, ctx, cfg)?;
            Ok(FlowResult { mu, trace })
        }
        Algorithm::Alg2 | Algorithm::Alg3 => {
            let s0 = SigmaField::new(vec![1.0; n], level)?;
            let (sigma, trace) = if alg == Algorithm::Alg2 {
                backward_euler_flow(&s0, ctx, cfg)?
            } else {
                adaptive_flow(&s0, ctx, cfg)?
            };
            Ok(FlowResult { mu: sigma.square(), trace })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsolve::SolverConfig;
    use crate::problems::{DeltaRule, RectTransportProblem};

    fn zero_ctx() -> EnergyContext {
        RectTransportProblem::benchmark()
            .context(8, 0, DeltaRule::H2, SolverConfig::default())
            .unwrap()
            .with_zero_load()
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = FlowConfig {
            alpha: 1.0,
            ..FlowConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "alpha"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_criterion_basics() {
        let mut t = FlowTrace::default();
        assert!(!exit_criterion(&t, 1.0, 1.0));
        t.rows.push(TraceRow {
            step: 1,
            tau: 1.0,
            delta_sigma: 0.0,
            grad_norm: 0.0,
            kkt: 0.0,
            newton_iters: 1,
            restarts: 0,
            energy: 0.0,
        });
        assert!(exit_criterion(&t, 1.0, 1e-30));
        t.rows[0].grad_norm = 2.0;
        assert!(!exit_criterion(&t, 1.0, 1.0));
        assert!(exit_criterion(&t, 2.0, 1.0));
    }

    #[test]
    fn zero_load_single_step_closed_form() {
        let ctx = zero_ctx();
        let n = ctx.n_cells();
        let old = SigmaField::new(vec![1.0; n], 0).unwrap();
        let tau = 0.7;
        let (new, iters) = backward_euler_step(&old, tau, &ctx, &FlowConfig::default()).unwrap();
        assert_eq!(iters, 1);
        for (s, a) in new.values().iter().zip(&ctx.areas) {
            assert!((s - 1.0 / (1.0 + 2.0 * tau * a)).abs() < 1e-14);
        }
    }

    #[test]
    fn tiny_tau_keeps_sigma() {
        let ctx = RectTransportProblem::benchmark()
            .context(8, 0, DeltaRule::H2, SolverConfig::default())
            .unwrap();
        let old = SigmaField::new(vec![1.0; ctx.n_cells()], 0).unwrap();
        let (new, _) = backward_euler_step(&old, 1e-12, &ctx, &FlowConfig::default()).unwrap();
        assert!(new.values().iter().all(|s| (s - 1.0).abs() < 1e-10));
    }

    #[test]
    fn forward_euler_zero_load() {
        let ctx = zero_ctx();
        let n = ctx.n_cells();
        let area = ctx.areas[0];
        let one = |tau0: f64| FlowConfig {
            tau0,
            n_step: 1,
            ..FlowConfig::default()
        };
        let mu1 = DensityField::constant(n, 1.0, 0).unwrap();
        let (mu, _) = projected_forward_euler(&mu1, &ctx, &one(0.5)).unwrap();
        assert!(mu.values().iter().all(|&m| m == 1.0 - 0.5 * area));
        // τ|T_i| = 1/2 halves the density in one step
        let (mu, _) = projected_forward_euler(&mu1, &ctx, &one(0.5 / area)).unwrap();
        assert!(mu.values().iter().all(|&m| m == 0.5));
        let (mu, trace) = projected_forward_euler(&DensityField::zeros(n, 0), &ctx, &one(0.5)).unwrap();
        assert!(trace.converged && trace.is_empty());
        assert!(mu.values().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn forward_euler_zero_load_reaches_zero() {
        let ctx = zero_ctx();
        let cfg = FlowConfig {
            tau0: 0.5,
            n_step: 1000,
            ..FlowConfig::default()
        };
        let mu0 = DensityField::constant(ctx.n_cells(), 1.0, 0).unwrap();
        let (mu, trace) = projected_forward_euler(&mu0, &ctx, &cfg).unwrap();
        assert!(trace.converged);
        assert!(mu.values().iter().all(|&m| m == 0.0));
        assert_eq!(trace.last().unwrap().grad_norm, 0.0);
    }

    #[test]
    fn oversized_explicit_step_is_reported() {
        let ctx = RectTransportProblem::benchmark()
            .context(8, 0, DeltaRule::H2, SolverConfig::default())
            .unwrap();
        let cfg = FlowConfig {
            tau0: 1e4,
            n_step: 5,
            ..FlowConfig::default()
        };
        let mu0 = DensityField::zeros(ctx.n_cells(), 0);
        let res = projected_forward_euler(&mu0, &ctx, &cfg);
        assert!(matches!(res, Err(Error::StepSizeTooLarge { .. })), "{res:?}");
    }

    #[test]
    fn adaptive_zero_load_geometric_tau() {
        let ctx = zero_ctx();
        let cfg = FlowConfig {
            n_step: 15,
            ..FlowConfig::default()
        };
        let s0 = SigmaField::new(vec![1.0; ctx.n_cells()], 0).unwrap();
        let (_, trace) = adaptive_flow(&s0, &ctx, &cfg).unwrap();
        for (l, row) in trace.rows.iter().enumerate() {
            assert_eq!(row.restarts, 0);
            assert!((row.tau - cfg.tau0 * cfg.alpha.powi(l as i32 + 1)).abs() <= 1e-12 * row.tau);
        }
    }
}

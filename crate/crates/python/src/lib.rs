//! Python bindings for the transport-density solver.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mkflow_core::diagnostics::hess_f_extremal_eigs;
use mkflow_core::energy::{kkt_residual_from, DensityField, EnergyContext, SigmaField};
use mkflow_core::flow::{run_flow, Algorithm, FlowConfig};
use mkflow_core::linsolve::SolverConfig;
use mkflow_core::mesh::TriMesh;
use mkflow_core::problems::{DeltaRule, LevelSetup, RectTransportProblem};
use mkflow_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_)
        | Error::Alignment(_)
        | Error::Domain(_)
        | Error::Config { .. }
        | Error::Capacity { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Benchmark problem on one mesh level: translated square source and sink.
#[pyclass(module = "mkflow", frozen)]
struct Level {
    problem: RectTransportProblem,
    coarse: TriMesh,
    ctx: EnergyContext,
}

#[pymethods]
impl Level {
    #[new]
    #[pyo3(signature = (level, delta_rule = "h2", k0 = 8))]
    fn new(level: u32, delta_rule: &str, k0: usize) -> PyResult<Self> {
        let rule: DeltaRule = delta_rule.parse().map_err(to_py)?;
        let problem = RectTransportProblem::benchmark();
        let LevelSetup { coarse, ctx, .. } = problem
            .setup(k0, level, rule, SolverConfig::default())
            .map_err(to_py)?;
        Ok(Self { problem, coarse, ctx })
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.ctx.n_cells()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.ctx.delta
    }

    #[getter]
    fn areas(&self) -> Vec<f64> {
        self.ctx.areas.clone()
    }

    #[getter]
    fn exact_w1(&self) -> PyResult<f64> {
        self.problem.exact_w1().map_err(to_py)
    }

    fn exact_mu(&self) -> PyResult<Vec<f64>> {
        self.problem.exact_mu_cell_averages(&self.coarse).map_err(to_py)
    }

    fn energy(&self, mu: Vec<f64>) -> PyResult<f64> {
        Ok(self.eval_mu(mu)?.energy())
    }

    fn grad_e(&self, mu: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.eval_mu(mu)?.grad_e().to_vec())
    }

    fn grad_f(&self, sigma: Vec<f64>) -> PyResult<Vec<f64>> {
        let s = self.sigma(sigma)?;
        let eval = self.ctx.evaluate_sigma(&s).map_err(to_py)?;
        Ok(eval.grad_f(s.values()))
    }

    fn hess_f_vec(&self, sigma: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let s = self.sigma(sigma)?;
        mkflow_core::energy::hess_f_vec(&s, &v, &self.ctx).map_err(to_py)
    }

    #[pyo3(signature = (mu, toll = 1e-8))]
    fn kkt_residual(&self, mu: Vec<f64>, toll: f64) -> PyResult<f64> {
        let eval = self.eval_mu(mu)?;
        Ok(kkt_residual_from(eval.mu(), eval.grad_e(), toll))
    }

    /// Extremal eigenvalues of the Hessian of `F` at `σ`.
    fn spectrum<'py>(&self, py: Python<'py>, sigma: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.sigma(sigma)?;
        let r = hess_f_extremal_eigs(&s, &self.ctx).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("lambda_min", r.lambda_min)?;
        d.set_item("lambda_max", r.lambda_max)?;
        d.set_item("converged", r.converged)?;
        d.set_item("iterations", r.iterations)?;
        Ok(d)
    }

    /// Weighted L² density error and `|E/2 − W₁|`.
    fn errors(&self, mu: Vec<f64>, energy: f64) -> PyResult<(f64, f64)> {
        let mu = DensityField::new(mu, self.ctx.level).map_err(to_py)?;
        let r = self.problem.error_report(&mu, energy, &self.coarse).map_err(to_py)?;
        Ok((r.l2_mu_error, r.w1_error))
    }

    /// Runs a flow from `μ ≡ 1` and returns the density and trace.
    #[pyo3(signature = (alg = "alg3", tau0 = None, alpha = None, toll = None, n_step = None))]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        alg: &str,
        tau0: Option<f64>,
        alpha: Option<f64>,
        toll: Option<f64>,
        n_step: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let alg: Algorithm = alg.parse().map_err(to_py)?;
        let d = FlowConfig::default();
        let cfg = FlowConfig {
            tau0: tau0.unwrap_or(d.tau0),
            alpha: alpha.unwrap_or(d.alpha),
            toll: toll.unwrap_or(d.toll),
            n_step: n_step.unwrap_or(d.n_step),
            ..d
        };
        cfg.validate().map_err(to_py)?;
        let res = run_flow(alg, &self.ctx, &cfg).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("converged", res.trace.converged)?;
        out.set_item("steps", res.trace.len())?;
        out.set_item("energy", res.trace.last().map(|r| r.energy))?;
        out.set_item("delta_sigma", res.trace.rows.iter().map(|r| r.delta_sigma).collect::<Vec<_>>())?;
        out.set_item("tau", res.trace.rows.iter().map(|r| r.tau).collect::<Vec<_>>())?;
        out.set_item("mu", res.mu.into_values())?;
        Ok(out)
    }
}

impl Level {
    fn eval_mu(&self, mu: Vec<f64>) -> PyResult<mkflow_core::energy::StateEval> {
        let mu = DensityField::new(mu, self.ctx.level).map_err(to_py)?;
        self.ctx.evaluate(&mu).map_err(to_py)
    }

    fn sigma(&self, sigma: Vec<f64>) -> PyResult<SigmaField> {
        SigmaField::new(sigma, self.ctx.level).map_err(to_py)
    }
}

#[pymodule]
fn mkflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Level>()?;
    m.add("EXACT_W1", mkflow_core::problems::exact_w1())?;
    Ok(())
}

//! Deterministic writers for traces, convergence tables, VTK fields and run
//! records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diagnostics::SpectrumReport;
use crate::energy::DensityField;
use crate::error::{Error, Result};
use crate::flow::{Algorithm, FlowConfig, FlowTrace, TraceRow};
use crate::mesh::TriMesh;
use crate::problems::{DeltaRule, ErrorRecord};

pub const TRACE_HEADER: &str = "step,tau,delta_sigma,grad_norm,kkt,newton_iters,restarts,energy";
pub const CONVERGENCE_HEADER: &str = "level,h,l2_mu_error,w1_error";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn trace_csv_string(trace: &FlowTrace) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in &trace.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.tau, r.delta_sigma, r.grad_norm, r.kkt, r.newton_iters, r.restarts, r.energy
        );
    }
    s
}

pub fn write_trace_csv(trace: &FlowTrace, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &trace_csv_string(trace))
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {line}: {msg}")),
        )
    };
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 2, "expected 8 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 2, "bad integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad float"));
            Ok(TraceRow {
                step: int(f[0])?,
                tau: real(f[1])?,
                delta_sigma: real(f[2])?,
                grad_norm: real(f[3])?,
                kkt: real(f[4])?,
                newton_iters: int(f[5])?,
                restarts: int(f[6])?,
                energy: real(f[7])?,
            })
        })
        .collect()
}

/// Legacy ASCII VTK unstructured grid with the cell scalar `mu`.
pub fn field_vtk_string(mesh: &TriMesh, mu: &DensityField) -> Result<String> {
    if mu.len() != mesh.n_triangles() {
        return Err(Error::InvalidArgument(format!(
            "field has {} values for {} cells",
            mu.len(),
            mesh.n_triangles()
        )));
    }
    mu.check_feasible()?;
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str("transport density\n");
    s.push_str("ASCII\n");
    s.push_str("DATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.n_vertices());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} 0", v[0], v[1]);
    }
    let nt = mesh.n_triangles();
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "CELL_DATA {nt}");
    s.push_str("SCALARS mu double 1\n");
    s.push_str("LOOKUP_TABLE default\n");
    for v in mu.values() {
        let _ = writeln!(s, "{v}");
    }
    Ok(s)
}

pub fn write_field_vtk(mesh: &TriMesh, mu: &DensityField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &field_vtk_string(mesh, mu)?)
}

/// Errors of one converged level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceRow {
    pub level: u32,
    pub h: f64,
    pub l2_mu_error: f64,
    pub w1_error: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 matching points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all abscissae coincide".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceSlopes {
    pub l2_mu_error: f64,
    pub w1_error: f64,
}

pub fn convergence_slopes(rows: &[ConvergenceRow]) -> Result<ConvergenceSlopes> {
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let l2: Vec<f64> = rows.iter().map(|r| r.l2_mu_error).collect();
    let w1: Vec<f64> = rows.iter().map(|r| r.w1_error).collect();
    Ok(ConvergenceSlopes {
        l2_mu_error: loglog_slope(&h, &l2)?,
        w1_error: loglog_slope(&h, &w1)?,
    })
}

pub fn convergence_table_string(rows: &[ConvergenceRow]) -> Result<String> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "convergence table needs at least 2 levels, got {}",
            rows.len()
        )));
    }
    let slopes = convergence_slopes(rows)?;
    let mut s = String::from(CONVERGENCE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.level, r.h, r.l2_mu_error, r.w1_error);
    }
    let _ = writeln!(s, "# slope l2_mu_error {}", slopes.l2_mu_error);
    let _ = writeln!(s, "# slope w1_error {}", slopes.w1_error);
    Ok(s)
}

pub fn write_convergence_table(rows: &[ConvergenceRow], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &convergence_table_string(rows)?)
}

/// Inputs that determine a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub flow: FlowConfig,
    pub delta_rule: DeltaRule,
    pub delta: f64,
    pub level: u32,
    pub base_divisions: usize,
}

impl RunConfig {
    /// SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinalDiagnostics {
    pub converged: bool,
    pub energy: f64,
    pub w1_estimate: f64,
    pub grad_norm: f64,
    pub kkt: f64,
    pub spectrum: Option<SpectrumReport>,
    pub errors: Option<ErrorRecord>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub trace: Vec<TraceRow>,
    pub diagnostics: FinalDiagnostics,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn new(
        config: RunConfig,
        trace: &FlowTrace,
        diagnostics: FinalDiagnostics,
        wall_time_s: f64,
    ) -> Self {
        let config_hash = config.content_hash();
        Self {
            config,
            config_hash,
            trace: trace.rows.clone(),
            diagnostics,
            wall_time_s,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("run record: {e}")))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json();
        s.push('\n');
        write_file(path.as_ref(), &s)
    }
}

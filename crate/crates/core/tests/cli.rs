use std::path::Path;
use std::process::{Command, Output};

use mkflow::io::{read_trace_csv, write_field_vtk, RunRecord};
use mkflow::mesh::build_unit_square_mesh;
use mkflow::problems::exact_mu_cell_averages;
use mkflow::energy::DensityField;

fn mkflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkflow"))
        .args(args)
        .env("MKFLOW_OUT_DIR", out)
        .output()
        .unwrap()
}

#[test]
fn adaptive_solve_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkflow(&["solve", "--level", "0", "--alg", "alg3", "--tau", "1", "--alpha", "1.2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_trace_csv(dir.path().join("trace.csv")).unwrap();
    assert!(!rows.is_empty() && rows.iter().all(|r| r.tau > 0.0));
    let rec = RunRecord::from_json(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert!(rec.diagnostics.converged);
    assert_eq!(rec.config_hash, rec.config.content_hash());
    let vtk = std::fs::read_to_string(dir.path().join("mu.vtk")).unwrap();
    assert!(vtk.contains("CELLS 128 512"));
}

#[test]
fn fixed_step_solve_converges_with_enough_steps() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkflow(
        &["solve", "--level", "0", "--alg", "alg2", "--tau", "1", "--toll", "1e-9", "--n-step", "20000"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_trace_csv(dir.path().join("trace.csv")).unwrap();
    // increments keep shrinking long after the transient
    for w in [1000, 2000, 4000, 8000].windows(2) {
        assert!(rows[w[1]].delta_sigma < rows[w[0]].delta_sigma);
    }
    // the adaptive scheme gets there in far fewer steps
    let adaptive = mkflow(&["solve", "--level", "0", "--alg", "alg3", "--out", dir.path().join("a").to_str().unwrap()], dir.path());
    assert_eq!(adaptive.status.code(), Some(0));
    let fast = read_trace_csv(dir.path().join("a").join("trace.csv")).unwrap();
    assert!(rows.len() >= 10 * fast.len());
}

#[test]
fn invalid_alpha_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkflow(&["solve", "--alg", "alg3", "--alpha", "1.0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn exhausted_budget_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkflow(&["solve", "--alg", "alg2", "--n-step", "3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(read_trace_csv(dir.path().join("trace.csv")).unwrap().len(), 3);
}

#[test]
fn single_level_study_has_no_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkflow(&["study", "--levels", "0", "--no-spectrum"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(dir.path().join("level0").join("trace.csv").exists());
    assert!(!dir.path().join("convergence.csv").exists());
}

#[test]
fn flag_beats_environment_for_output() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = mkflow(&["solve", "--alg", "alg3", "--out", flag_dir.path().to_str().unwrap()], env_dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_dir.path().join("trace.csv").exists());
    assert!(!env_dir.path().join("trace.csv").exists());
}

#[test]
fn exact_field_renders_three_bands() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = build_unit_square_mesh(8).unwrap();
    let avg = exact_mu_cell_averages(&mesh).unwrap();
    let path = dir.path().join("exact.vtk");
    write_field_vtk(&mesh, &DensityField::new(avg, 0).unwrap(), &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let data = text.split("LOOKUP_TABLE default").nth(1).unwrap();
    let vals: Vec<f64> = data.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(vals.len(), 128);
    assert_eq!(vals.iter().cloned().fold(0.0, f64::max), 0.25);
}

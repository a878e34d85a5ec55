use std::sync::OnceLock;

use faer::Side;
use proptest::prelude::*;

use mkflow::energy::{grad_e, grad_f, hess_f_vec, DensityField, EnergyContext, SigmaField};
use mkflow::fem::{assemble_cell_stiffness, solve_state};
use mkflow::flow::{FlowConfig, FlowTrace, TraceRow};
use mkflow::io::{field_vtk_string, trace_csv_string};
use mkflow::linsolve::{weighted_mean, SolverConfig, SolverKind};
use mkflow::mesh::{build_unit_square_mesh, refine};
use mkflow::problems::{exact_mu_cell_averages, DeltaRule, RectTransportProblem};

fn level0() -> &'static EnergyContext {
    static CTX: OnceLock<EnergyContext> = OnceLock::new();
    CTX.get_or_init(|| {
        RectTransportProblem::benchmark()
            .context(8, 0, DeltaRule::H2, SolverConfig::default())
            .unwrap()
    })
}

fn density() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0..2.0f64], 128)
}

fn signed() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, 128)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mesh_counts_and_areas(k in 1usize..24) {
        let m = build_unit_square_mesh(k).unwrap();
        prop_assert_eq!(m.n_triangles(), 2 * k * k);
        prop_assert_eq!(m.n_vertices(), (k + 1) * (k + 1));
        prop_assert!((m.areas().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (t, tri) in m.triangles().iter().enumerate() {
            let [a, b, c] = tri.map(|i| m.vertices()[i]);
            let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            prop_assert!(cross > 0.0);
            prop_assert!((0.5 * cross - m.areas()[t]).abs() <= 1e-15);
        }
    }

    #[test]
    fn refinement_is_nested(k in 1usize..12) {
        let coarse = build_unit_square_mesh(k).unwrap();
        let (fine, map) = refine(&coarse);
        prop_assert!(map.check(&coarse, &fine).is_ok());
        for c in 0..coarse.n_triangles() {
            let kids = map.children_of(c);
            let s: f64 = kids.iter().map(|&f| fine.areas()[f]).sum();
            prop_assert!((s - coarse.areas()[c]).abs() <= 1e-12);
            for &f in &kids {
                prop_assert_eq!(map.parent_of(f), c);
            }
        }
        for v in coarse.vertices() {
            prop_assert!(fine.vertices().iter().any(|w| w == v));
        }
    }

    #[test]
    fn duality_and_galerkin_optimality(mu in density(), seeds in prop::collection::vec(-1.0..1.0f64, 289 * 3)) {
        let ctx = level0();
        let k = &ctx.stiffness;
        let mu = DensityField::new(mu, 0).unwrap();
        let st = solve_state(&mu, ctx.delta, k, &ctx.load, &ctx.solver).unwrap();
        let a = k.operator(mu.values(), ctx.delta).matrix;
        let f = &ctx.load.values;
        let fu = dot(f, &st.u);
        let uau = dot(&st.u, &a.mul(&st.u));
        prop_assert!((fu - uau).abs() <= 1e-10 * fu.abs().max(1.0));
        let best = 2.0 * fu - uau;
        let w = k.vertex_masses();
        for v in seeds.chunks(289) {
            let mut v = v.to_vec();
            let m = weighted_mean(&v, w);
            v.iter_mut().for_each(|x| *x -= m);
            let d = 2.0 * dot(f, &v) - dot(&v, &a.mul(&v));
            prop_assert!(best >= d - 1e-12);
        }
    }

    #[test]
    fn operator_dominates_relaxation(mu in prop::collection::vec(0.0..3.0f64, 8), v in prop::collection::vec(-1.0..1.0f64, 25)) {
        // k = 2 coarse mesh: 8 cells, 25 fine vertices
        let coarse = build_unit_square_mesh(2).unwrap();
        let (fine, map) = refine(&coarse);
        let k = assemble_cell_stiffness(&coarse, &fine, &map).unwrap();
        let delta = 0.05;
        let a = k.operator(&mu, delta).matrix;
        let full = k.full_stiffness();
        let lhs = dot(&v, &a.mul(&v));
        let rhs = delta * dot(&v, &full.mul(&v));
        prop_assert!(lhs >= rhs - 1e-10);
    }

    #[test]
    fn gradient_consistency_is_exact(s in signed()) {
        let ctx = level0();
        let sigma = SigmaField::new(s.clone(), 0).unwrap();
        let gf = grad_f(&sigma, ctx).unwrap();
        let ge = grad_e(&sigma.square(), ctx).unwrap();
        for i in 0..s.len() {
            prop_assert_eq!(gf[i], 2.0 * s[i] * ge[i]);
        }
    }

    #[test]
    fn hessian_vector_product_is_symmetric(s in signed(), v in signed(), w in signed()) {
        let ctx = level0();
        let sigma = SigmaField::new(s, 0).unwrap();
        let hv = hess_f_vec(&sigma, &v, ctx).unwrap();
        let hw = hess_f_vec(&sigma, &w, ctx).unwrap();
        let a = dot(&w, &hv);
        let b = dot(&v, &hw);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
    }

    #[test]
    fn trace_and_vtk_writers_are_deterministic(
        rows in prop::collection::vec((1e-6..1e6f64, 0.0..1.0f64, 0.0..1.0f64, 0usize..30), 0..40),
        mu in prop::collection::vec(0.0..1.0f64, 128),
    ) {
        let trace = FlowTrace {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(tau, ds, g, it))| TraceRow {
                    step: i + 1,
                    tau,
                    delta_sigma: ds,
                    grad_norm: g,
                    kkt: g * 0.5,
                    newton_iters: it,
                    restarts: it % 3,
                    energy: 1.0 / (1.0 + i as f64),
                })
                .collect(),
            converged: false,
        };
        prop_assert_eq!(trace_csv_string(&trace), trace_csv_string(&trace.clone()));
        let mesh = build_unit_square_mesh(8).unwrap();
        let field = DensityField::new(mu, 0).unwrap();
        prop_assert_eq!(
            field_vtk_string(&mesh, &field).unwrap(),
            field_vtk_string(&mesh, &field.clone()).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn energy_is_convex_along_segments(a in density(), b in density()) {
        let ctx = level0();
        let e = |m: Vec<f64>| ctx.evaluate(&DensityField::new(m, 0).unwrap()).unwrap().energy();
        let e0 = e(a.clone());
        let e1 = e(b.clone());
        for t in [0.25, 0.5, 0.75] {
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
            prop_assert!(e(mid) <= (1.0 - t) * e0 + t * e1 + 1e-10);
        }
    }
}

#[test]
fn relaxed_operator_spectrum_bound() {
    let coarse = build_unit_square_mesh(2).unwrap();
    let (fine, map) = refine(&coarse);
    let k = assemble_cell_stiffness(&coarse, &fine, &map).unwrap();
    let delta = 0.1;
    let nonzero_min = |m: Vec<Vec<f64>>| {
        let d = faer::Mat::from_fn(m.len(), m.len(), |i, j| m[i][j]);
        let ev = d.self_adjoint_eigenvalues(Side::Lower).unwrap();
        // the constant kernel gives the single zero eigenvalue
        ev[1]
    };
    let base = nonzero_min(k.full_stiffness().to_dense());
    for mu in [vec![0.0; 8], vec![1.0; 8], (0..8).map(|i| i as f64 * 0.3).collect()] {
        let a = nonzero_min(k.operator(&mu, delta).matrix.to_dense());
        assert!(a >= delta * base - 1e-10, "{a} < {}", delta * base);
    }
}

#[test]
fn direct_and_iterative_solves_agree() {
    for level in [0, 1] {
        let direct = RectTransportProblem::benchmark()
            .context(8, level, DeltaRule::H2, SolverConfig::default())
            .unwrap();
        let iterative = EnergyContext {
            solver: SolverConfig {
                kind: SolverKind::Iterative,
                ..SolverConfig::default()
            },
            ..direct.clone()
        };
        let n = direct.n_cells();
        let mu = DensityField::new((0..n).map(|i| ((i * 7) % 5) as f64 * 0.4).collect(), level).unwrap();
        let a = direct.evaluate(&mu).unwrap();
        let b = iterative.evaluate(&mu).unwrap();
        let w = direct.stiffness.vertex_masses();
        assert!(weighted_mean(a.u(), w).abs() <= 1e-12);
        assert!(weighted_mean(b.u(), w).abs() <= 1e-12);
        let diff = a.u().iter().zip(b.u()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.u().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff <= 1e-8 * scale, "level {level}: {diff} vs {scale}");
    }
}

#[test]
fn exact_averages_are_mirror_symmetric() {
    for k in [8, 16, 32] {
        let mesh = build_unit_square_mesh(k).unwrap();
        let avg = exact_mu_cell_averages(&mesh).unwrap();
        let kf = k as f64;
        for t in 0..mesh.n_triangles() {
            let c = mesh.centroid(t);
            // x -> 1 - x maps a lower triangle onto the upper triangle of the
            // mirrored cell, up to a shift in y that stays inside the cell row
            let s = (0..mesh.n_triangles())
                .find(|&s| {
                    let d = mesh.centroid(s);
                    (d[0] - (1.0 - c[0])).abs() < 1e-12 && (d[1] * kf).floor() == (c[1] * kf).floor()
                })
                .expect("mirror triangle");
            assert!((avg[t] - avg[s]).abs() <= 1e-15, "k={k} t={t}");
        }
        let max = avg.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 0.25);
        for (t, &a) in avg.iter().enumerate() {
            if a == 0.25 {
                let c = mesh.centroid(t);
                assert!(c[0] > 3.0 / 8.0 && c[0] < 5.0 / 8.0);
            }
        }
    }
}

#[test]
fn flow_config_defaults_are_valid() {
    assert!(FlowConfig::default().validate().is_ok());
}

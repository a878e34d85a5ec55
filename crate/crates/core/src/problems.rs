//! Rectangle-to-rectangle transport benchmark with a closed-form solution.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::energy::{DensityField, EnergyContext};
use crate::error::{Error, Result};
use crate::fem::{assemble_cell_stiffness, assemble_load, Rect};
use crate::linsolve::SolverConfig;
use crate::mesh::{hierarchy_level, RefinementMap, TriMesh};

/// Choice of the relaxation `δ_n` as a function of the coarse mesh size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DeltaRule {
    #[serde(rename = "h")]
    H,
    #[serde(rename = "h2")]
    H2,
}

impl DeltaRule {
    pub fn delta(self, h: f64) -> f64 {
        match self {
            DeltaRule::H => h,
            DeltaRule::H2 => h * h,
        }
    }
}

impl fmt::Display for DeltaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeltaRule::H => "h",
            DeltaRule::H2 => "h2",
        })
    }
}

impl FromStr for DeltaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(DeltaRule::H),
            "h2" | "h^2" => Ok(DeltaRule::H2),
            other => Err(Error::config("delta_rule", format!("expected `h` or `h2`, got `{other}`"))),
        }
    }
}

/// Uniform density on `rect_plus` transported to `rect_minus`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RectTransportProblem {
    pub rect_plus: Rect,
    pub rect_minus: Rect,
    pub density: f64,
}

/// Error of a discrete optimum against the exact solution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ErrorRecord {
    pub l2_mu_error: f64,
    pub w1_error: f64,
}

/// Meshes and energy context for one level of the hierarchy.
#[derive(Debug, Clone)]
pub struct LevelSetup {
    pub coarse: TriMesh,
    pub fine: TriMesh,
    pub map: RefinementMap,
    pub ctx: EnergyContext,
}

impl RectTransportProblem {
    pub fn new(rect_plus: Rect, rect_minus: Rect) -> Result<Self> {
        let inside = |r: &Rect| r.x0 >= 0.0 && r.x1 <= 1.0 && r.y0 >= 0.0 && r.y1 <= 1.0;
        if !inside(&rect_plus) || !inside(&rect_minus) {
            return Err(Error::InvalidArgument("rectangles must lie in the unit square".into()));
        }
        if (rect_plus.area() - rect_minus.area()).abs() > 1e-14 {
            return Err(Error::InvalidArgument("rectangles must have equal areas".into()));
        }
        let overlap = rect_plus.x0 < rect_minus.x1
            && rect_minus.x0 < rect_plus.x1
            && rect_plus.y0 < rect_minus.y1
            && rect_minus.y0 < rect_plus.y1;
        if overlap {
            return Err(Error::InvalidArgument("rectangles must be disjoint".into()));
        }
        Ok(Self {
            rect_plus,
            rect_minus,
            density: 1.0,
        })
    }

    /// `χ([1/8,3/8]×[1/4,3/4])` to `χ([5/8,7/8]×[1/4,3/4])`.
    pub fn benchmark() -> Self {
        Self::new(
            Rect::new(0.125, 0.375, 0.25, 0.75).expect("rect"),
            Rect::new(0.625, 0.875, 0.25, 0.75).expect("rect"),
        )
        .expect("benchmark problem")
    }

    /// Source and sink exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            rect_plus: self.rect_minus,
            rect_minus: self.rect_plus,
            density: self.density,
        }
    }

    pub fn mass(&self) -> f64 {
        self.density * self.rect_plus.area()
    }

    fn shift(&self) -> Option<[f64; 2]> {
        let (p, m) = (&self.rect_plus, &self.rect_minus);
        let w_ok = ((p.x1 - p.x0) - (m.x1 - m.x0)).abs() < 1e-14;
        let h_ok = ((p.y1 - p.y0) - (m.y1 - m.y0)).abs() < 1e-14;
        (w_ok && h_ok).then(|| [m.x0 - p.x0, m.y0 - p.y0])
    }

    /// `W₁(f⁺, f⁻)`: mass times translation length for congruent rectangles.
    pub fn exact_w1(&self) -> Result<f64> {
        let d = self
            .shift()
            .ok_or_else(|| Error::InvalidArgument("rectangles are not translates".into()))?;
        Ok(self.mass() * d[0].hypot(d[1]))
    }

    /// Pointwise exact transport density for a horizontal translation.
    pub fn exact_mu(&self, p: [f64; 2]) -> Result<f64> {
        let d = self.shift().filter(|d| d[1] == 0.0).ok_or_else(|| {
            Error::InvalidArgument("closed form requires a horizontal translation".into())
        })?;
        let r = &self.rect_plus;
        if p[1] < r.y0 || p[1] > r.y1 {
            return Ok(0.0);
        }
        let w = r.x1 - r.x0;
        let a = (p[0] - r.x0).clamp(0.0, w);
        let b = (p[0] - r.x0 - d[0]).clamp(0.0, w);
        Ok(self.density * (a - b).abs())
    }

    /// Exact cell averages of `μ*`; the density is affine in `x` on every
    /// aligned triangle, so the average is the centroid value.
    pub fn exact_mu_cell_averages(&self, coarse: &TriMesh) -> Result<Vec<f64>> {
        for r in [&self.rect_plus, &self.rect_minus] {
            for v in [r.x0, r.x1, r.y0, r.y1] {
                if !coarse.is_lattice_coordinate(v) {
                    return Err(Error::Alignment(format!(
                        "support corner {v} is off the {}-division lattice",
                        coarse.divisions()
                    )));
                }
            }
        }
        (0..coarse.n_triangles())
            .map(|t| self.exact_mu(coarse.centroid(t)))
            .collect()
    }

    /// The energy at the optimum equals twice the transport cost, so the
    /// cost estimate is `E / 2`.
    pub fn error_report(&self, mu: &DensityField, e_value: f64, coarse: &TriMesh) -> Result<ErrorRecord> {
        if mu.len() != coarse.n_triangles() {
            return Err(Error::InvalidArgument(format!(
                "density has {} entries, mesh has {} cells",
                mu.len(),
                coarse.n_triangles()
            )));
        }
        let avg = self.exact_mu_cell_averages(coarse)?;
        let l2 = mu
            .values()
            .iter()
            .zip(&avg)
            .zip(coarse.areas())
            .map(|((m, a), t)| t * (m - a) * (m - a))
            .sum::<f64>()
            .sqrt();
        Ok(ErrorRecord {
            l2_mu_error: l2,
            w1_error: (0.5 * e_value - self.exact_w1()?).abs(),
        })
    }

    /// Builds meshes and the energy context of level `level`.
    pub fn setup(
        &self,
        base_divisions: usize,
        level: u32,
        rule: DeltaRule,
        solver: SolverConfig,
    ) -> Result<LevelSetup> {
        let (coarse, fine, map) = hierarchy_level(base_divisions, level)?;
        let stiffness = Arc::new(assemble_cell_stiffness(&coarse, &fine, &map)?);
        let mut load = assemble_load(&self.rect_plus, &self.rect_minus, &fine)?;
        load.values.iter_mut().for_each(|v| *v *= self.density);
        let delta = rule.delta(coarse.h());
        let ctx = EnergyContext::new(stiffness, load, coarse.areas().to_vec(), delta, solver, level)?;
        Ok(LevelSetup {
            coarse,
            fine,
            map,
            ctx,
        })
    }

    pub fn context(
        &self,
        base_divisions: usize,
        level: u32,
        rule: DeltaRule,
        solver: SolverConfig,
    ) -> Result<EnergyContext> {
        Ok(self.setup(base_divisions, level, rule, solver)?.ctx)
    }
}

/// `W₁` of the benchmark problem.
pub fn exact_w1() -> f64 {
    RectTransportProblem::benchmark().exact_w1().expect("translate")
}

pub fn exact_mu_cell_averages(coarse: &TriMesh) -> Result<Vec<f64>> {
    RectTransportProblem::benchmark().exact_mu_cell_averages(coarse)
}

pub fn error_report(mu: &DensityField, e_value: f64, coarse: &TriMesh) -> Result<ErrorRecord> {
    RectTransportProblem::benchmark().error_report(mu, e_value, coarse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;

    #[test]
    fn w1_values() {
        assert_eq!(exact_w1(), 1.0 / 16.0);
        let p = RectTransportProblem::benchmark();
        assert_eq!(p.swapped().exact_w1().unwrap(), 1.0 / 16.0);
        let near = RectTransportProblem::new(p.rect_plus, p.rect_plus.translated(0.25, 0.0)).unwrap();
        assert_eq!(near.exact_w1().unwrap(), 1.0 / 32.0);
    }

    #[test]
    fn cell_averages_bands_and_mass() {
        let mesh = build_unit_square_mesh(16).unwrap();
        let avg = exact_mu_cell_averages(&mesh).unwrap();
        let mut mass = 0.0;
        for (t, a) in avg.iter().enumerate() {
            let c = mesh.centroid(t);
            let in_band = c[1] > 0.25 && c[1] < 0.75;
            if in_band && c[0] > 0.375 && c[0] < 0.625 {
                assert_eq!(*a, 0.25);
            }
            if !in_band || c[0] < 0.125 || c[0] > 0.875 {
                assert_eq!(*a, 0.0);
            }
            mass += a * mesh.areas()[t];
        }
        assert!((mass - 1.0 / 16.0).abs() < 1e-14);
        assert_eq!(avg.iter().cloned().fold(0.0, f64::max), 0.25);
    }

    #[test]
    fn misaligned_mesh_is_rejected() {
        let mesh = build_unit_square_mesh(6).unwrap();
        assert!(matches!(exact_mu_cell_averages(&mesh), Err(Error::Alignment(_))));
    }

    #[test]
    fn error_report_at_exact_data() {
        let mesh = build_unit_square_mesh(8).unwrap();
        let avg = exact_mu_cell_averages(&mesh).unwrap();
        let rec = error_report(&DensityField::new(avg.clone(), 0).unwrap(), 1.0 / 8.0, &mesh).unwrap();
        assert_eq!(rec.l2_mu_error, 0.0);
        assert_eq!(rec.w1_error, 0.0);
        let zero = error_report(&DensityField::zeros(avg.len(), 0), 0.0, &mesh).unwrap();
        let want = avg
            .iter()
            .zip(mesh.areas())
            .map(|(a, t)| t * a * a)
            .sum::<f64>()
            .sqrt();
        assert_eq!(zero.l2_mu_error, want);
        assert_eq!(zero.w1_error, 1.0 / 16.0);
    }

    #[test]
    fn delta_rule_parsing() {
        assert_eq!("h".parse::<DeltaRule>().unwrap(), DeltaRule::H);
        assert_eq!("h2".parse::<DeltaRule>().unwrap(), DeltaRule::H2);
        assert!("h3".parse::<DeltaRule>().is_err());
        assert_eq!(DeltaRule::H2.delta(0.5), 0.25);
    }
}

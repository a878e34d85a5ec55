//! Structured triangulations of the unit square and their uniform refinement.
//!
//! Vertices are stored in row-major lattice order (`p = j * (k + 1) + i` for the
//! point `(i / k, j / k)`). Every lattice cell `c = j * k + i` is split along its
//! lower-left to upper-right diagonal into a lower triangle (index `2c`) and an
//! upper triangle (index `2c + 1`), both counter-clockwise.

use crate::error::{Error, Result};

/// Diagonal orientation used by [`build_unit_square_mesh`].
pub const DIAGONAL_ORIENTATION: &str = "lower-left-to-upper-right";

/// A conforming triangulation of `(0, 1)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    areas: Vec<f64>,
    level: u32,
    divisions: usize,
}

/// Parent/child relation between a mesh and its uniform refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementMap {
    parent_of_fine_cell: Vec<usize>,
    children_of_coarse_cell: Vec<[usize; 4]>,
}

/// Builds the structured mesh with `k` intervals per side.
pub fn build_unit_square_mesh(k: usize) -> Result<TriMesh> {
    build_with_level(k, 0)
}

fn build_with_level(k: usize, level: u32) -> Result<TriMesh> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "divisions per side must be at least 1".into(),
        ));
    }
    let kf = k as f64;
    let mut vertices = Vec::with_capacity((k + 1) * (k + 1));
    for j in 0..=k {
        for i in 0..=k {
            vertices.push([i as f64 / kf, j as f64 / kf]);
        }
    }
    let vid = |i: usize, j: usize| j * (k + 1) + i;
    let mut triangles = Vec::with_capacity(2 * k * k);
    for j in 0..k {
        for i in 0..k {
            triangles.push([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)]);
            triangles.push([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)]);
        }
    }
    let areas = triangles
        .iter()
        .map(|t| signed_area(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]))
        .collect();
    Ok(TriMesh {
        vertices,
        triangles,
        areas,
        level,
        divisions: k,
    })
}

fn signed_area(a: &[f64; 2], b: &[f64; 2], c: &[f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Splits every triangle into four through its edge midpoints.
///
/// On the structured family the children are exactly the triangles of the
/// `2k` lattice, so the fine mesh keeps the lattice ordering.
pub fn refine(mesh: &TriMesh) -> (TriMesh, RefinementMap) {
    let k = mesh.divisions;
    let fine = build_with_level(2 * k, mesh.level + 1).expect("2k >= 2");
    let kk = 2 * k;
    let fine_tri = |i: usize, j: usize, upper: bool| 2 * (j * kk + i) + usize::from(upper);

    let mut children = Vec::with_capacity(mesh.n_triangles());
    let mut parent = vec![0; fine.n_triangles()];
    for j in 0..k {
        for i in 0..k {
            let (fi, fj) = (2 * i, 2 * j);
            let lower = [
                fine_tri(fi, fj, false),
                fine_tri(fi + 1, fj, false),
                fine_tri(fi + 1, fj + 1, false),
                fine_tri(fi + 1, fj, true),
            ];
            let upper = [
                fine_tri(fi, fj, true),
                fine_tri(fi, fj + 1, true),
                fine_tri(fi + 1, fj + 1, true),
                fine_tri(fi, fj + 1, false),
            ];
            for group in [lower, upper] {
                let c = children.len();
                for &f in &group {
                    parent[f] = c;
                }
                children.push(group);
            }
        }
    }
    (
        fine,
        RefinementMap {
            parent_of_fine_cell: parent,
            children_of_coarse_cell: children,
        },
    )
}

impl TriMesh {
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn divisions(&self) -> usize {
        self.divisions
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Mesh parameter: the triangle diameter `sqrt(2) / k`.
    pub fn h(&self) -> f64 {
        std::f64::consts::SQRT_2 / self.divisions as f64
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t];
        let (va, vb, vc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        [
            (va[0] + vb[0] + vc[0]) / 3.0,
            (va[1] + vb[1] + vc[1]) / 3.0,
        ]
    }

    /// Whether `x` lies on a lattice line of this mesh.
    pub fn is_lattice_coordinate(&self, x: f64) -> bool {
        let s = x * self.divisions as f64;
        (s - s.round()).abs() <= 1e-9
    }

    /// Lumped P1 masses `∫ φ_p dx` for every vertex.
    pub fn vertex_masses(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_vertices()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                m[v] += self.areas[t] / 3.0;
            }
        }
        m
    }
}

impl RefinementMap {
    pub fn parent_of(&self, fine_cell: usize) -> usize {
        self.parent_of_fine_cell[fine_cell]
    }

    pub fn children_of(&self, coarse_cell: usize) -> [usize; 4] {
        self.children_of_coarse_cell[coarse_cell]
    }

    pub fn n_coarse(&self) -> usize {
        self.children_of_coarse_cell.len()
    }

    pub fn n_fine(&self) -> usize {
        self.parent_of_fine_cell.len()
    }

    /// Checks that this map links `coarse` with `fine`.
    pub fn check(&self, coarse: &TriMesh, fine: &TriMesh) -> Result<()> {
        if self.n_coarse() != coarse.n_triangles()
            || self.n_fine() != fine.n_triangles()
            || fine.divisions() != 2 * coarse.divisions()
        {
            return Err(Error::InvalidArgument(format!(
                "refinement map ({} -> {}) does not match meshes ({} -> {})",
                self.n_coarse(),
                self.n_fine(),
                coarse.n_triangles(),
                fine.n_triangles()
            )));
        }
        for (c, kids) in self.children_of_coarse_cell.iter().enumerate() {
            let area: f64 = kids.iter().map(|&f| fine.areas()[f]).sum();
            if (area - coarse.areas()[c]).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "children of coarse cell {c} do not tile it"
                )));
            }
        }
        Ok(())
    }
}

/// Coarse mesh at `level` of the hierarchy rooted at `base_divisions`, together
/// with its refinement.
pub fn hierarchy_level(base_divisions: usize, level: u32) -> Result<(TriMesh, TriMesh, RefinementMap)> {
    let k = base_divisions
        .checked_mul(1usize << level)
        .ok_or_else(|| Error::InvalidArgument(format!("level {level} too deep")))?;
    let coarse = build_with_level(k, level)?;
    let (fine, map) = refine(&coarse);
    Ok((coarse, fine, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_in_triangle(p: [f64; 2], mesh: &TriMesh, t: usize) -> bool {
        let [a, b, c] = mesh.triangles()[t];
        let v = mesh.vertices();
        let s1 = signed_area(&v[a], &v[b], &p);
        let s2 = signed_area(&v[b], &v[c], &p);
        let s3 = signed_area(&v[c], &v[a], &p);
        s1 >= -1e-15 && s2 >= -1e-15 && s3 >= -1e-15
    }

    #[test]
    fn single_division() {
        let m = build_unit_square_mesh(1).unwrap();
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.n_vertices(), 4);
        assert!(m.areas().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn coarsest_benchmark_mesh() {
        let m = build_unit_square_mesh(8).unwrap();
        assert_eq!(m.n_triangles(), 128);
        assert_eq!(m.n_vertices(), 81);
        assert!((m.h() - 2f64.sqrt() / 8.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_areas() {
        let m = build_unit_square_mesh(2).unwrap();
        assert!(m.areas().iter().all(|&a| (a - 0.125).abs() < 1e-15));
        let m = build_unit_square_mesh(7).unwrap();
        let total: f64 = m.areas().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(m.areas().iter().all(|&a| a > 0.0));
    }

    #[test]
    fn zero_divisions_rejected() {
        assert!(matches!(
            build_unit_square_mesh(0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn refine_counts() {
        let (f, map) = refine(&build_unit_square_mesh(1).unwrap());
        assert_eq!(f.n_triangles(), 8);
        assert_eq!(f.n_vertices(), 9);
        assert_eq!(map.n_coarse(), 2);

        let mut m = build_unit_square_mesh(8).unwrap();
        for _ in 0..4 {
            m = refine(&m).0;
        }
        assert_eq!(m.n_triangles(), 2 * (8 * 16) * (8 * 16));
        assert_eq!(m.n_triangles(), 32768);
        assert_eq!(m.level(), 4);
    }

    #[test]
    fn children_tile_parents() {
        let c = build_unit_square_mesh(8).unwrap();
        let (f, map) = refine(&c);
        assert_eq!(f.n_triangles(), 512);
        map.check(&c, &f).unwrap();
        for t in 0..c.n_triangles() {
            let kids = map.children_of(t);
            let mut sorted = kids;
            sorted.sort_unstable();
            assert!(sorted.windows(2).all(|w| w[0] != w[1]));
            for &kid in &kids {
                assert_eq!(map.parent_of(kid), t);
                assert!((f.areas()[kid] - c.areas()[t] / 4.0).abs() < 1e-15);
                assert!(point_in_triangle(f.centroid(kid), &c, t));
            }
        }
    }

    #[test]
    fn nested_vertices() {
        let c = build_unit_square_mesh(4).unwrap();
        let (f, _) = refine(&c);
        for v in c.vertices() {
            assert!(f.vertices().iter().any(|w| w == v));
        }
    }

    #[test]
    fn counter_clockwise_and_conforming() {
        let m = build_unit_square_mesh(5).unwrap();
        use std::collections::HashMap;
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in m.triangles() {
            let v = m.vertices();
            assert!(signed_area(&v[tri[0]], &v[tri[1]], &v[tri[2]]) > 0.0);
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let boundary = edges.values().filter(|&&c| c == 1).count();
        assert!(edges.values().all(|&c| c <= 2));
        assert_eq!(boundary, 4 * 5);
    }

    #[test]
    fn forcing_rectangles_are_unions_of_triangles() {
        for k in [8, 16, 32] {
            let m = build_unit_square_mesh(k).unwrap();
            for (x0, x1) in [(0.125, 0.375), (0.625, 0.875)] {
                let (y0, y1) = (0.25, 0.75);
                let mut covered = 0.0;
                for t in 0..m.n_triangles() {
                    let inside = m.triangles()[t].iter().all(|&v| {
                        let p = m.vertices()[v];
                        p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
                    });
                    if inside {
                        covered += m.areas()[t];
                    }
                }
                assert!((covered - (x1 - x0) * (y1 - y0)).abs() < 1e-12);
            }
        }
    }
}

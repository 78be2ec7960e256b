use super::coarse::CoarseMesh;
use super::polygon;
use super::submesh::{initial_triangulation, FineSubmesh};
use crate::error::Result;

/// Shape-regularity summary of a coarse mesh through the simplicial
/// sub-meshes of its cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    /// `min R_S / H_S` over all simplices.
    pub min_inradius_ratio: f64,
    /// `min H_S / H_T` over all pairs of a cell and one of its simplices.
    pub min_size_ratio: f64,
    /// `min H_F / H_T` over all cells and their faces.
    pub min_face_ratio: f64,
    pub max_faces_per_cell: usize,
    /// Set when some simplex has zero inradius.
    pub degenerate: bool,
}

impl RegularityReport {
    fn empty() -> Self {
        RegularityReport {
            min_inradius_ratio: f64::INFINITY,
            min_size_ratio: f64::INFINITY,
            min_face_ratio: f64::INFINITY,
            max_faces_per_cell: 0,
            degenerate: false,
        }
    }

    fn add_simplex(&mut self, tri: &[nalgebra::Point2<f64>; 3], cell_diameter: f64) {
        let hs = polygon::diameter(tri);
        let rs = polygon::inradius(tri);
        let ratio = if hs > 0.0 { rs / hs } else { 0.0 };
        if !(ratio > 1e-14) {
            self.degenerate = true;
        }
        self.min_inradius_ratio = self.min_inradius_ratio.min(ratio.max(0.0));
        self.min_size_ratio = self.min_size_ratio.min(hs / cell_diameter);
    }
}

/// Regularity of the mesh with the initial (unrefined) sub-triangulation
/// of every cell.
pub fn admissibility_report(mesh: &CoarseMesh) -> Result<RegularityReport> {
    let mut report = RegularityReport::empty();
    for c in 0..mesh.num_cells() {
        let ht = mesh.cell_diameters[c];
        let (vertices, triangles) = initial_triangulation(&mesh.cell_points(c))?;
        for t in triangles {
            report.add_simplex(&[vertices[t[0]], vertices[t[1]], vertices[t[2]]], ht);
        }
        for &f in &mesh.cell_faces[c] {
            report.min_face_ratio = report.min_face_ratio.min(mesh.face_diameters[f] / ht);
        }
        report.max_faces_per_cell = report.max_faces_per_cell.max(mesh.cell_faces[c].len());
    }
    Ok(report)
}

/// Regularity of a refined sub-mesh relative to its parent diameter.
pub fn submesh_report(sub: &FineSubmesh, cell_diameter: f64) -> RegularityReport {
    let mut report = RegularityReport::empty();
    for t in 0..sub.num_triangles() {
        report.add_simplex(&sub.mesh.triangle(t), cell_diameter);
    }
    report
}

use nalgebra::Point2;

use super::coarse::CoarseMesh;
use super::polygon;
use super::trimesh::TriMesh;
use crate::error::{Error, Result};

/// Default cap on the number of fine simplices of one sub-mesh.
pub const DEFAULT_ELEMENT_CAP: usize = 4_000_000;

/// Matching simplicial sub-mesh of one coarse cell.
///
/// Boundary edges carry the local index (within the parent cell) of the
/// coarse face they subdivide as their tag.
#[derive(Debug, Clone)]
pub struct FineSubmesh {
    pub parent: usize,
    pub mesh: TriMesh,
    pub refinements: usize,
    pub h: f64,
}

/// Simplicial partition of a polygon whose boundary edges are the polygon
/// edges (triangles are kept as they are so that sub-meshes nest with red
/// refinement of triangular meshes).
pub fn initial_triangulation(
    points: &[Point2<f64>],
) -> Result<(Vec<Point2<f64>>, Vec<[usize; 3]>)> {
    let n = points.len();
    if n == 3 {
        return Ok((points.to_vec(), vec![[0, 1, 2]]));
    }
    if polygon::is_convex(points) {
        let mut vertices = points.to_vec();
        vertices.push(polygon::centroid(points));
        let triangles = (0..n).map(|i| [n, i, (i + 1) % n]).collect();
        return Ok((vertices, triangles));
    }
    let triangles = polygon::ear_clip(points)
        .ok_or_else(|| Error::InvalidMesh("polygon cannot be triangulated".into()))?;
    Ok((points.to_vec(), triangles))
}

impl FineSubmesh {
    fn initial(coarse: &CoarseMesh, cell: usize) -> Result<TriMesh> {
        let points = coarse.cell_points(cell);
        let n = points.len();
        let (vertices, triangles) = initial_triangulation(&points)?;
        TriMesh::new(vertices, triangles, |a, b| {
            if a < n && b < n {
                if b == (a + 1) % n {
                    return Some(a);
                }
                if a == (b + 1) % n {
                    return Some(b);
                }
            }
            None
        })
    }

    pub fn build(coarse: &CoarseMesh, cell: usize, target_h: f64, cap: usize) -> Result<Self> {
        if !(target_h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target_h must be positive, got {target_h}"
            )));
        }
        let mesh = Self::initial(coarse, cell)?;
        let ntri = mesh.num_triangles();
        let diam = mesh.max_diameter();
        let mut refinements = 0;
        while diam / f64::powi(2.0, refinements as i32) > target_h * (1.0 + 1e-12) {
            refinements += 1;
            let count = ntri.saturating_mul(1usize << (2 * refinements).min(62));
            if count > cap || refinements > 30 {
                return Err(Error::TooManyElements { count, cap });
            }
        }
        Self::refined(mesh, cell, refinements)
    }

    /// Sub-mesh after a fixed number of red refinements.
    pub fn build_with_refinements(
        coarse: &CoarseMesh,
        cell: usize,
        refinements: usize,
    ) -> Result<Self> {
        let mesh = Self::initial(coarse, cell)?;
        Self::refined(mesh, cell, refinements)
    }

    fn refined(mut mesh: TriMesh, cell: usize, refinements: usize) -> Result<Self> {
        for _ in 0..refinements {
            mesh = mesh.refine();
        }
        let h = mesh.max_diameter();
        Ok(FineSubmesh {
            parent: cell,
            mesh,
            refinements,
            h,
        })
    }

    /// Fine edges subdividing local face `local_face` of the parent cell.
    pub fn face_edges(&self, local_face: usize) -> Vec<usize> {
        (0..self.mesh.num_edges())
            .filter(|&e| self.mesh.edge_tags[e] == Some(local_face))
            .collect()
    }

    pub fn num_triangles(&self) -> usize {
        self.mesh.num_triangles()
    }
}

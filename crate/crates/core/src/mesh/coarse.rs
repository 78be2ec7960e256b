use std::collections::HashMap;

use nalgebra::{Point2, Vector2};

use super::polygon;
use super::trimesh::TriMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceKind {
    Interface(usize, usize),
    Boundary(usize),
}

#[derive(Debug, Clone)]
pub struct Face {
    /// Endpoints in lexicographic coordinate order; this order fixes the
    /// face polynomial parametrization seen by both incident cells.
    pub vertices: [usize; 2],
    pub kind: FaceKind,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        matches!(self.kind, FaceKind::Boundary(_))
    }
}

/// Polytopal coarse mesh of a planar domain.
#[derive(Debug, Clone)]
pub struct CoarseMesh {
    pub vertices: Vec<Point2<f64>>,
    /// Counter-clockwise vertex loops.
    pub cells: Vec<Vec<usize>>,
    pub faces: Vec<Face>,
    /// Local face `i` of a cell joins its vertices `i` and `i + 1`.
    pub cell_faces: Vec<Vec<usize>>,
    pub cell_normals: Vec<Vec<Vector2<f64>>>,
    pub cell_diameters: Vec<f64>,
    pub cell_areas: Vec<f64>,
    pub cell_centroids: Vec<Point2<f64>>,
    pub face_diameters: Vec<f64>,
    /// Mesh size `max_T H_T`.
    pub h: f64,
}

impl CoarseMesh {
    pub fn from_polygons(vertices: Vec<Point2<f64>>, cells: Vec<Vec<usize>>) -> Result<Self> {
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let mut faces: Vec<Face> = Vec::new();
        let mut directed: Vec<(usize, usize)> = Vec::new();
        let mut cell_faces = Vec::with_capacity(cells.len());
        let mut cell_normals = Vec::with_capacity(cells.len());
        let mut cell_diameters = Vec::with_capacity(cells.len());
        let mut cell_areas = Vec::with_capacity(cells.len());
        let mut cell_centroids = Vec::with_capacity(cells.len());
        for (c, loop_) in cells.iter().enumerate() {
            if loop_.len() < 3 {
                return Err(Error::InvalidMesh(format!(
                    "cell {c} has fewer than 3 vertices"
                )));
            }
            if let Some(&v) = loop_.iter().find(|&&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "cell {c} references missing vertex {v}"
                )));
            }
            let pts: Vec<Point2<f64>> = loop_.iter().map(|&v| vertices[v]).collect();
            if polygon::signed_double_area(&pts) < 0.0 {
                return Err(Error::InvalidMesh(format!("cell {c} is clockwise")));
            }
            let n = loop_.len();
            let mut local_faces = Vec::with_capacity(n);
            let mut normals = Vec::with_capacity(n);
            for i in 0..n {
                let a = loop_[i];
                let b = loop_[(i + 1) % n];
                let d = vertices[b] - vertices[a];
                let len = d.norm();
                if len == 0.0 {
                    return Err(Error::InvalidMesh(format!(
                        "cell {c} has a zero-length face"
                    )));
                }
                normals.push(Vector2::new(d.y, -d.x) / len);
                let key = (a.min(b), a.max(b));
                let f = match lookup.get(&key) {
                    Some(&f) => {
                        match faces[f].kind {
                            FaceKind::Boundary(first) if directed[f] != (a, b) => {
                                faces[f].kind = FaceKind::Interface(first, c);
                            }
                            FaceKind::Boundary(_) => {
                                return Err(Error::InvalidMesh(format!(
                                    "inconsistent orientation across face ({a}, {b})"
                                )))
                            }
                            FaceKind::Interface(..) => {
                                return Err(Error::InvalidMesh(format!(
                                    "face ({a}, {b}) shared by more than two cells"
                                )))
                            }
                        }
                        f
                    }
                    None => {
                        let f = faces.len();
                        let (pa, pb) = (vertices[a], vertices[b]);
                        let ordered = if pa.x < pb.x || (pa.x == pb.x && pa.y < pb.y) {
                            [a, b]
                        } else {
                            [b, a]
                        };
                        faces.push(Face {
                            vertices: ordered,
                            kind: FaceKind::Boundary(c),
                        });
                        directed.push((a, b));
                        lookup.insert(key, f);
                        f
                    }
                };
                local_faces.push(f);
            }
            cell_faces.push(local_faces);
            cell_normals.push(normals);
            cell_diameters.push(polygon::diameter(&pts));
            cell_areas.push(polygon::area(&pts));
            cell_centroids.push(polygon::centroid(&pts));
        }
        let face_diameters = faces
            .iter()
            .map(|f| (vertices[f.vertices[1]] - vertices[f.vertices[0]]).norm())
            .collect();
        let h = cell_diameters.iter().copied().fold(0.0, f64::max);
        Ok(CoarseMesh {
            vertices,
            cells,
            faces,
            cell_faces,
            cell_normals,
            cell_diameters,
            cell_areas,
            cell_centroids,
            face_diameters,
            h,
        })
    }

    pub fn from_trimesh(mesh: &TriMesh) -> Result<Self> {
        Self::from_polygons(
            mesh.vertices.clone(),
            mesh.triangles.iter().map(|t| t.to_vec()).collect(),
        )
    }

    /// Structured quadrilateral mesh of the unit square.
    pub fn unit_square_quads(n: usize) -> Result<Self> {
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let vertices = (0..=n)
            .flat_map(|j| {
                (0..=n).map(move |i| Point2::new(i as f64 / n as f64, j as f64 / n as f64))
            })
            .collect();
        let cells = (0..n)
            .flat_map(|j| {
                (0..n).map(move |i| vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)])
            })
            .collect();
        Self::from_polygons(vertices, cells)
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn interior_faces(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.faces.len()).filter(|&f| !self.faces[f].is_boundary())
    }

    pub fn num_interior_faces(&self) -> usize {
        self.interior_faces().count()
    }

    pub fn cell_points(&self, c: usize) -> Vec<Point2<f64>> {
        self.cells[c].iter().map(|&v| self.vertices[v]).collect()
    }

    pub fn face_points(&self, f: usize) -> (Point2<f64>, Point2<f64>) {
        let [a, b] = self.faces[f].vertices;
        (self.vertices[a], self.vertices[b])
    }

    pub fn total_area(&self) -> f64 {
        self.cell_areas.iter().sum()
    }

    /// Checks the structural invariants (two cells per interface, unit
    /// normals, closed cell boundaries).
    pub fn validate(&self) -> Result<()> {
        for (c, faces) in self.cell_faces.iter().enumerate() {
            let mut closure = Vector2::zeros();
            let mut perimeter = 0.0;
            for (i, &f) in faces.iter().enumerate() {
                let n = self.cell_normals[c][i];
                if (n.norm() - 1.0).abs() > 1e-14 {
                    return Err(Error::InvalidMesh(format!("non-unit normal on cell {c}")));
                }
                closure += n * self.face_diameters[f];
                perimeter += self.face_diameters[f];
                let incident = match self.faces[f].kind {
                    FaceKind::Interface(a, b) => a == c || b == c,
                    FaceKind::Boundary(a) => a == c,
                };
                if !incident {
                    return Err(Error::InvalidMesh(format!(
                        "face {f} does not list cell {c}"
                    )));
                }
            }
            if closure.norm() > 1e-12 * perimeter {
                return Err(Error::InvalidMesh(format!(
                    "cell {c} boundary is not closed"
                )));
            }
        }
        Ok(())
    }
}

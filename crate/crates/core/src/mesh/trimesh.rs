use std::collections::HashMap;

use nalgebra::{Point2, Vector2};

use super::polygon;
use crate::error::{Error, Result};

/// Conforming triangulation with edge topology.
///
/// Triangles are counter-clockwise; local edge `i` joins local vertices `i`
/// and `i + 1`. Edges are stored with their endpoints in lexicographic
/// coordinate order, which fixes the parametrization of edge polynomials
/// independently of the adjacent triangles (and is translation invariant,
/// so periodically identified edges share it).
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Point2<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    /// First and (for interior edges) second adjacent triangle.
    pub edge_triangles: Vec<(usize, Option<usize>)>,
    /// Boundary marker of boundary edges, `None` for interior edges.
    pub edge_tags: Vec<Option<usize>>,
    pub triangle_edges: Vec<[usize; 3]>,
}

fn lexicographic(a: Point2<f64>, b: Point2<f64>) -> bool {
    a.x < b.x || (a.x == b.x && a.y < b.y)
}

impl TriMesh {
    /// Builds the topology. `boundary_tag` is queried for every boundary
    /// edge with its two vertex indices (in triangle order).
    pub fn new(
        vertices: Vec<Point2<f64>>,
        triangles: Vec<[usize; 3]>,
        mut boundary_tag: impl FnMut(usize, usize) -> Option<usize>,
    ) -> Result<Self> {
        let mut lookup: HashMap<(usize, usize), usize> =
            HashMap::with_capacity(triangles.len() * 2);
        let mut edges = Vec::with_capacity(triangles.len() * 3 / 2 + 8);
        let mut edge_triangles: Vec<(usize, Option<usize>)> = Vec::with_capacity(edges.capacity());
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(edges.capacity());
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let pts = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
            if polygon::signed_double_area(&pts) < 0.0 {
                return Err(Error::InvalidMesh(format!("triangle {t} is clockwise")));
            }
            let mut te = [0; 3];
            for i in 0..3 {
                let a = tri[i];
                let b = tri[(i + 1) % 3];
                let key = (a.min(b), a.max(b));
                match lookup.get(&key) {
                    Some(&e) => {
                        if edge_triangles[e].1.is_some() {
                            return Err(Error::InvalidMesh(format!(
                                "edge ({a}, {b}) shared by more than two triangles"
                            )));
                        }
                        if directed[e] == (a, b) {
                            return Err(Error::InvalidMesh(format!(
                                "inconsistent orientation across edge ({a}, {b})"
                            )));
                        }
                        edge_triangles[e].1 = Some(t);
                        te[i] = e;
                    }
                    None => {
                        let e = edges.len();
                        let ordered = if lexicographic(vertices[a], vertices[b]) {
                            [a, b]
                        } else {
                            [b, a]
                        };
                        edges.push(ordered);
                        edge_triangles.push((t, None));
                        directed.push((a, b));
                        lookup.insert(key, e);
                        te[i] = e;
                    }
                }
            }
            triangle_edges.push(te);
        }
        let edge_tags = edge_triangles
            .iter()
            .zip(&directed)
            .map(|(&(_, second), &(a, b))| match second {
                Some(_) => None,
                None => boundary_tag(a, b).or(Some(usize::MAX)),
            })
            .collect();
        Ok(TriMesh {
            vertices,
            triangles,
            edges,
            edge_triangles,
            edge_tags,
            triangle_edges,
        })
    }

    /// Structured triangulation of the tensor grid `xs x ys`; every
    /// rectangle is split along its south-west to north-east diagonal.
    /// Rectangle `(i, j)` yields triangles `2 (j nx + i)` (below the
    /// diagonal) and `2 (j nx + i) + 1`. Boundary tags: 0 south, 1 east,
    /// 2 north, 3 west.
    pub fn structured(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let nx = xs.len() - 1;
        let ny = ys.len() - 1;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for &y in ys {
            for &x in xs {
                vertices.push(Point2::new(x, y));
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        let (x0, x1, y0, y1) = (xs[0], xs[nx], ys[0], ys[ny]);
        let verts = vertices.clone();
        TriMesh::new(vertices, triangles, |a, b| {
            let (p, q) = (verts[a], verts[b]);
            if p.y == y0 && q.y == y0 {
                Some(0)
            } else if p.x == x1 && q.x == x1 {
                Some(1)
            } else if p.y == y1 && q.y == y1 {
                Some(2)
            } else if p.x == x0 && q.x == x0 {
                Some(3)
            } else {
                None
            }
        })
    }

    /// Uniform `n x n` triangulation of the unit square.
    pub fn unit_square(n: usize) -> Result<Self> {
        let ticks: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        Self::structured(&ticks, &ticks)
    }

    /// Red refinement: each triangle `t = [a, b, c]` is replaced by the
    /// children `4t .. 4t + 3` = `[a, ab, ca]`, `[ab, b, bc]`, `[ca, bc, c]`,
    /// `[ab, bc, ca]`. Old vertices keep their indices; the midpoint of
    /// edge `e` gets index `nv + e`. Boundary tags are inherited.
    pub fn refine(&self) -> TriMesh {
        let nv = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend(self.edges.iter().map(|&[a, b]| {
            Point2::from((self.vertices[a].coords + self.vertices[b].coords) * 0.5)
        }));
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for (tri, te) in self.triangles.iter().zip(&self.triangle_edges) {
            let [a, b, c] = *tri;
            let ab = nv + te[0];
            let bc = nv + te[1];
            let ca = nv + te[2];
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let mut child_tags: HashMap<(usize, usize), usize> = HashMap::new();
        for (e, tag) in self.edge_tags.iter().enumerate() {
            if let Some(tag) = *tag {
                let [a, b] = self.edges[e];
                let m = nv + e;
                child_tags.insert((a.min(m), a.max(m)), tag);
                child_tags.insert((b.min(m), b.max(m)), tag);
            }
        }
        TriMesh::new(vertices, triangles, |a, b| {
            child_tags.get(&(a.min(b), a.max(b))).copied()
        })
        .expect("red refinement of a valid mesh is valid")
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn triangle(&self, t: usize) -> [Point2<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        polygon::area(&self.triangle(t))
    }

    pub fn triangle_diameter(&self, t: usize) -> f64 {
        polygon::diameter(&self.triangle(t))
    }

    pub fn triangle_centroid(&self, t: usize) -> Point2<f64> {
        let [a, b, c] = self.triangle(t);
        Point2::from((a.coords + b.coords + c.coords) / 3.0)
    }

    pub fn edge_points(&self, e: usize) -> (Point2<f64>, Point2<f64>) {
        let [a, b] = self.edges[e];
        (self.vertices[a], self.vertices[b])
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let (a, b) = self.edge_points(e);
        (b - a).norm()
    }

    /// Outward unit normal of local edge `i` of triangle `t`.
    pub fn outward_normal(&self, t: usize, i: usize) -> Vector2<f64> {
        let tri = self.triangle(t);
        let d = tri[(i + 1) % 3] - tri[i];
        Vector2::new(d.y, -d.x) / d.norm()
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.edge_triangles[e].1.is_none()
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.num_triangles())
            .map(|t| self.triangle_diameter(t))
            .fold(0.0, f64::max)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles())
            .map(|t| self.triangle_area(t))
            .sum()
    }
}
